//! CSV writers for training runs. Matrix indices are 1-based.

use std::io::{self, Write};

use crate::train::TrainReport;

pub fn write_loss_curve<W: Write>(mut w: W, reports: &[TrainReport]) -> io::Result<()> {
    writeln!(w, "iteration,flavor,seed,mse")?;
    for r in reports {
        for (it, mse) in r.mse.iter().enumerate() {
            writeln!(w, "{},{},{},{:e}", it + 1, r.config.flavor, r.config.seed, mse)?;
        }
    }
    Ok(())
}

pub fn write_attn_dump<W: Write>(mut w: W, reports: &[TrainReport]) -> io::Result<()> {
    writeln!(w, "flavor,seed,block,row,col,value")?;
    for r in reports {
        for d in &r.dumps {
            for row in 0..d.values.rows() {
                for col in 0..d.values.cols() {
                    writeln!(
                        w,
                        "{},{},{},{},{},{:e}",
                        r.config.flavor,
                        r.config.seed,
                        d.block,
                        row + 1,
                        col + 1,
                        d.values[(row, col)]
                    )?;
                }
            }
        }
    }
    Ok(())
}
