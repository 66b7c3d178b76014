use attnlab::attention::{
    apply_skip, attention_softmax, attention_star, write_weights_csv, BlockAccess, BlockParams,
};
use attnlab::context::{encode_context, sample_context, CategoryDist, QTrueTable, TokenSequence};
use attnlab::handcrafted::{build_solution1, Sol1Variant};
use attnlab::{Mat, Rng};

fn random_mat(rows: usize, cols: usize, rng: &mut Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.normal()).unwrap()
}

#[test]
fn solution1_attention_moves_columns_right() {
    let t = TokenSequence::from_one_based(4, &[1, 3, 2, 2]).unwrap();
    let x = encode_context(&t);
    let p = build_solution1(&QTrueTable::pair_code(4), 4, 4, Sol1Variant::Corrected).unwrap();
    let out = attention_star(&x, &p.attn, true).unwrap();
    let mut expected = Mat::zeros(8, 4);
    expected[(0, 1)] = 2.0;
    expected[(2, 2)] = 2.0;
    expected[(1, 3)] = 2.0;
    assert_eq!(out.attn_t, expected);
    let skip = apply_skip(&out, &x, 1.0).unwrap();
    assert_eq!(skip.column(2), vec![0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn output_depends_only_on_the_product() {
    let mut rng = Rng::new(17);
    let (n, m) = (3, 5);
    let dist = CategoryDist::uniform(n).unwrap();
    for _ in 0..20 {
        let x = encode_context(&sample_context(n, m, &dist, &mut rng).unwrap());
        let q = random_mat(4, n + m, &mut rng);
        let k = random_mat(4, n + m, &mut rng);
        let v = random_mat(n + m, n + m, &mut rng);
        // k'^t q' = (G^{-t} k)^t (G q) = k^t q for an invertible G
        let mut g = random_mat(4, 4, &mut rng);
        for i in 0..4 {
            g[(i, i)] += 6.0;
        }
        let g_inv_t = invert(&g).transpose();
        let p1 = BlockParams::new(n, m, q.clone(), k.clone(), v.clone()).unwrap();
        let p2 = BlockParams::new(n, m, g.matmul(&q).unwrap(), g_inv_t.matmul(&k).unwrap(), v).unwrap();
        let a = attention_star(&x, &p1, true).unwrap();
        let b = attention_star(&x, &p2, true).unwrap();
        assert!(a.attn_t.max_abs_diff(&b.attn_t) < 1e-12 * a.attn_t.max_abs().max(1.0));
    }
}

fn invert(a: &Mat) -> Mat {
    // Gauss-Jordan with partial pivoting, small test matrices only
    let n = a.rows();
    let mut aug = Mat::zeros(n, 2 * n);
    aug.set_block(0, 0, a);
    aug.set_block(0, n, &Mat::identity(n));
    for c in 0..n {
        let piv = (c..n).max_by(|x, y| aug[(*x, c)].abs().total_cmp(&aug[(*y, c)].abs())).unwrap();
        for j in 0..2 * n {
            let tmp = aug[(c, j)];
            aug[(c, j)] = aug[(piv, j)];
            aug[(piv, j)] = tmp;
        }
        let d = aug[(c, c)];
        for j in 0..2 * n {
            aug[(c, j)] /= d;
        }
        for r in 0..n {
            if r != c {
                let f = aug[(r, c)];
                for j in 0..2 * n {
                    aug[(r, j)] -= f * aug[(c, j)];
                }
            }
        }
    }
    aug.block(0, n, n, n)
}

#[test]
fn linear_in_v() {
    let mut rng = Rng::new(3);
    let x = encode_context(&sample_context(4, 6, &CategoryDist::uniform(4).unwrap(), &mut rng).unwrap());
    let q = random_mat(2, 10, &mut rng);
    let k = random_mat(2, 10, &mut rng);
    let v = random_mat(10, 10, &mut rng);
    let p1 = BlockParams::new(4, 6, q.clone(), k.clone(), v.clone()).unwrap();
    let p2 = BlockParams::new(4, 6, q, k, v.scale(2.0).unwrap()).unwrap();
    let a = attention_star(&x, &p1, true).unwrap().attn_t;
    let b = attention_star(&x, &p2, true).unwrap().attn_t;
    assert_eq!(a.scale(2.0).unwrap(), b);
}

#[test]
fn positions_only_ignores_category_identity() {
    let mut rng = Rng::new(4);
    let (n, m) = (4, 6);
    let q = random_mat(3, n + m, &mut rng);
    let k = random_mat(3, n + m, &mut rng);
    let v = random_mat(n + m, n + m, &mut rng);
    let p = BlockParams::new(n, m, q, k, v).unwrap().with_access(
        BlockAccess::Positions,
        BlockAccess::Positions,
        BlockAccess::Positions,
    );
    let t = sample_context(n, m, &CategoryDist::uniform(n).unwrap(), &mut rng).unwrap();
    let perm = [2, 0, 3, 1];
    let relabelled = TokenSequence::new(n, t.tokens().iter().map(|c| perm[*c]).collect()).unwrap();
    let a = attention_star(&encode_context(&t), &p, true).unwrap();
    let b = attention_star(&encode_context(&relabelled), &p, true).unwrap();
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.attn_t, b.attn_t);
}

#[test]
fn categories_only_weights_do_not_depend_on_m() {
    let mut rng = Rng::new(5);
    let n = 3;
    let a2 = random_mat(n, n, &mut rng);
    let tokens = vec![0, 2, 1, 1, 0, 2, 2];
    let weights_for = |m: usize| {
        let mut q = Mat::zeros(n, n + m);
        q.set_block(0, 0, &a2);
        let mut k = Mat::zeros(n, n + m);
        k.set_block(0, 0, &Mat::identity(n));
        let p = BlockParams::new(n, m, q, k, Mat::zeros(n + m, n + m))
            .unwrap()
            .with_access(BlockAccess::Categories, BlockAccess::Categories, BlockAccess::Full);
        let t = TokenSequence::new(n, tokens[..m].to_vec()).unwrap();
        attention_star(&encode_context(&t), &p, true).unwrap().weights
    };
    let short = weights_for(4);
    let long = weights_for(7);
    assert_eq!(long.block(0, 0, 4, 4), short);
}

#[test]
fn row_convention_matches_column_convention() {
    let mut rng = Rng::new(6);
    let (n, m) = (3, 5);
    for softmax in [false, true] {
        let x = encode_context(&sample_context(n, m, &CategoryDist::uniform(n).unwrap(), &mut rng).unwrap());
        let q = random_mat(4, n + m, &mut rng);
        let k = random_mat(4, n + m, &mut rng);
        let v = random_mat(n + m, n + m, &mut rng);
        let mut p = BlockParams::new(n, m, q.clone(), k.clone(), v.clone()).unwrap();
        if softmax {
            p = p.with_softmax(2.0).unwrap();
        }
        let col = if softmax {
            attention_softmax(&x, &p, true).unwrap()
        } else {
            attention_star(&x, &p, true).unwrap()
        };
        // rows are tokens: Q = X^t q^t, K = X^t k^t, V = X^t v^t
        let xt = x.x().transpose();
        let qr = xt.matmul(&q.transpose()).unwrap();
        let kr = xt.matmul(&k.transpose()).unwrap();
        let vr = xt.matmul(&v.transpose()).unwrap();
        let mut scores = qr.matmul(&kr.transpose()).unwrap();
        for i in 0..m {
            if softmax {
                let row: Vec<f64> = (0..=i).map(|j| scores[(i, j)] / 2.0).collect();
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|s| (s - mx).exp()).sum();
                for j in 0..m {
                    scores[(i, j)] = if j <= i { (row[j] - mx).exp() / z } else { 0.0 };
                }
            } else {
                for j in i + 1..m {
                    scores[(i, j)] = 0.0;
                }
            }
        }
        let rows = scores.matmul(&vr).unwrap();
        assert!(rows.transpose().max_abs_diff(&col.attn_t) < 1e-12);
    }
}

#[test]
fn single_position_softmax_is_v_x() {
    let mut rng = Rng::new(7);
    let x = encode_context(&TokenSequence::new(3, vec![1]).unwrap());
    let v = random_mat(4, 4, &mut rng);
    let p = BlockParams::new(3, 1, random_mat(2, 4, &mut rng), random_mat(2, 4, &mut rng), v.clone())
        .unwrap()
        .with_softmax(1.0)
        .unwrap();
    let out = attention_softmax(&x, &p, true).unwrap();
    assert!(out.attn_t.max_abs_diff(&v.matmul(x.x()).unwrap()) < 1e-15);
}

#[test]
fn weights_csv_has_header_and_all_cells() {
    let mut buf = Vec::new();
    write_weights_csv(&mut buf, &Mat::identity(2)).unwrap();
    let s = String::from_utf8(buf).unwrap();
    assert_eq!(s.lines().count(), 5);
    assert!(s.starts_with("row,col,value\n1,1,1\n"));
}
