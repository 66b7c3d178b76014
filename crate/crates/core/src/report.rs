use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub id: String,
    pub value: f64,
    /// `None` for quantities that are reported but not judged.
    pub tolerance: Option<f64>,
    pub pass: bool,
}

/// Named residuals of a set of conditions, each with its own tolerance.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub subject: String,
    pub residuals: Vec<Residual>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl ResidualReport {
    pub fn new(subject: impl Into<String>) -> Self {
        ResidualReport {
            subject: subject.into(),
            residuals: Vec::new(),
            notes: Vec::new(),
        }
    }

    /// Records `|value| <= tolerance`. Non-finite values always fail.
    pub fn push(&mut self, id: impl Into<String>, value: f64, tolerance: f64) {
        let pass = value.is_finite() && value.abs() <= tolerance;
        self.residuals.push(Residual {
            id: id.into(),
            value,
            tolerance: Some(tolerance),
            pass,
        });
    }

    /// Records a quantity that is reported but not judged.
    pub fn info(&mut self, id: impl Into<String>, value: f64) {
        self.residuals.push(Residual {
            id: id.into(),
            value,
            tolerance: None,
            pass: value.is_finite(),
        });
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn extend(&mut self, prefix: &str, other: ResidualReport) {
        for mut r in other.residuals {
            r.id = format!("{prefix}{}", r.id);
            self.residuals.push(r);
        }
        self.notes.extend(other.notes);
    }

    pub fn passed(&self) -> bool {
        self.residuals.iter().all(|r| r.pass)
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.residuals.iter().find(|r| r.id == id).map(|r| r.value)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Residual> {
        self.residuals.iter().filter(|r| !r.pass)
    }

    /// Largest absolute value among judged residuals.
    pub fn max_judged(&self) -> f64 {
        self.residuals
            .iter()
            .filter(|r| r.tolerance.is_some())
            .fold(0.0, |m, r| m.max(r.value.abs()))
    }
}
