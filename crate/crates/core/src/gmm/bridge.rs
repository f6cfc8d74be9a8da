//! Parametric and tabular representations of the outcome bridge h and the
//! selection bridge q.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::ObservationRow;

/// Per-block fit diagnostics (one block per arm, or one pooled block).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockDiagnostics {
    /// `Some(a)` for a per-arm fit, `None` for a pooled fit.
    pub arm: Option<u8>,
    pub n_rows: usize,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    pub initial_moment_norm: f64,
    pub final_moment_norm: f64,
    /// Penalized objective after each accepted step (first entry: start).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objective_trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BridgeDiagnostics {
    pub iterations: usize,
    pub final_moment_norm: f64,
    #[serde(default)]
    pub blocks: Vec<BlockDiagnostics>,
}

impl BridgeDiagnostics {
    pub fn from_blocks(blocks: Vec<BlockDiagnostics>) -> Self {
        BridgeDiagnostics {
            iterations: blocks.iter().map(|b| b.iterations).max().unwrap_or(0),
            final_moment_norm: blocks.iter().map(|b| b.final_moment_norm).fold(0.0, f64::max),
            blocks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellRepr {
    key: Vec<f64>,
    value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellTableRepr {
    arms: [Vec<CellRepr>; 2],
}

/// Map from a concatenated key vector (for h: `s3 ++ s2 ++ x`; for q:
/// `s2 ++ s1 ++ x`) to a value, per arm. Keys match by exact float equality.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "CellTableRepr", into = "CellTableRepr")]
pub struct CellTable {
    cells: [Vec<(Vec<f64>, f64)>; 2],
    index: [HashMap<Vec<u64>, usize>; 2],
}

impl PartialEq for CellTable {
    fn eq(&self, other: &Self) -> bool {
        self.cells == other.cells
    }
}

fn bits(key: &[f64]) -> Vec<u64> {
    // Normalise -0.0 so it matches 0.0.
    key.iter().map(|v| (v + 0.0).to_bits()).collect()
}

impl CellTable {
    pub fn new() -> Self {
        CellTable {
            cells: [Vec::new(), Vec::new()],
            index: [HashMap::new(), HashMap::new()],
        }
    }

    pub fn insert(&mut self, a: u8, key: Vec<f64>, value: f64) {
        let a = a as usize;
        let b = bits(&key);
        if let Some(&i) = self.index[a].get(&b) {
            self.cells[a][i].1 = value;
        } else {
            self.index[a].insert(b, self.cells[a].len());
            self.cells[a].push((key, value));
        }
    }

    pub fn get(&self, a: u8, key: &[f64]) -> Option<f64> {
        self.index[a as usize]
            .get(&bits(key))
            .map(|&i| self.cells[a as usize][i].1)
    }

    pub fn cells(&self, a: u8) -> &[(Vec<f64>, f64)] {
        &self.cells[a as usize]
    }

    /// Apply `f` to every stored value.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> CellTable {
        let mut t = self.clone();
        for arm in t.cells.iter_mut() {
            for c in arm.iter_mut() {
                c.1 = f(c.1);
            }
        }
        t
    }

    fn lookup(&self, a: u8, blocks: [&[f64]; 3]) -> f64 {
        let key: Vec<f64> = blocks.concat();
        self.get(a, &key).unwrap_or(f64::NAN)
    }
}

impl Default for CellTable {
    fn default() -> Self {
        Self::new()
    }
}

impl From<CellTableRepr> for CellTable {
    fn from(r: CellTableRepr) -> Self {
        let mut t = CellTable::new();
        for (a, arm) in r.arms.into_iter().enumerate() {
            for c in arm {
                t.insert(a as u8, c.key, c.value);
            }
        }
        t
    }
}

impl From<CellTable> for CellTableRepr {
    fn from(t: CellTable) -> Self {
        let conv = |v: &Vec<(Vec<f64>, f64)>| {
            v.iter()
                .map(|(k, val)| CellRepr {
                    key: k.clone(),
                    value: *val,
                })
                .collect()
        };
        CellTableRepr {
            arms: [conv(&t.cells[0]), conv(&t.cells[1])],
        }
    }
}

/// `h(s3, s2, a, x) = s3ᵀθ₃ + s2ᵀθ₂ + xᵀθ₀ + intercept_a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearArm {
    pub s3: Vec<f64>,
    pub s2: Vec<f64>,
    pub x: Vec<f64>,
    pub intercept: f64,
}

impl LinearArm {
    pub fn constant(c: f64, d3: usize, d2: usize, dx: usize) -> Self {
        LinearArm {
            s3: vec![0.0; d3],
            s2: vec![0.0; d2],
            x: vec![0.0; dx],
            intercept: c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum OutcomeForm {
    Linear { arms: [LinearArm; 2] },
    Table { table: CellTable },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeBridge {
    #[serde(flatten)]
    pub form: OutcomeForm,
    #[serde(default)]
    pub diagnostics: BridgeDiagnostics,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl OutcomeBridge {
    pub fn linear(arms: [LinearArm; 2]) -> Self {
        OutcomeBridge {
            form: OutcomeForm::Linear { arms },
            diagnostics: BridgeDiagnostics::default(),
        }
    }

    pub fn table(table: CellTable) -> Self {
        OutcomeBridge {
            form: OutcomeForm::Table { table },
            diagnostics: BridgeDiagnostics::default(),
        }
    }

    /// Constant bridge `h ≡ c` for the given widths.
    pub fn constant(c: f64, d3: usize, d2: usize, dx: usize) -> Self {
        let arm = LinearArm::constant(c, d3, d2, dx);
        Self::linear([arm.clone(), arm])
    }

    pub fn eval(&self, s3: &[f64], s2: &[f64], a: u8, x: &[f64]) -> f64 {
        match &self.form {
            OutcomeForm::Linear { arms } => {
                let t = &arms[a as usize];
                dot(&t.s3, s3) + dot(&t.s2, s2) + dot(&t.x, x) + t.intercept
            }
            OutcomeForm::Table { table } => table.lookup(a, [s3, s2, x]),
        }
    }

    /// Evaluate at the row's own treatment.
    pub fn eval_row(&self, r: &ObservationRow) -> f64 {
        self.eval(&r.s3, &r.s2, r.a, &r.x)
    }

    /// `c·h + d`, used to build deliberately misspecified bridges.
    pub fn affine(&self, c: f64, d: f64) -> Self {
        let form = match &self.form {
            OutcomeForm::Linear { arms } => {
                let f = |t: &LinearArm| LinearArm {
                    s3: t.s3.iter().map(|v| c * v).collect(),
                    s2: t.s2.iter().map(|v| c * v).collect(),
                    x: t.x.iter().map(|v| c * v).collect(),
                    intercept: c * t.intercept + d,
                };
                OutcomeForm::Linear {
                    arms: [f(&arms[0]), f(&arms[1])],
                }
            }
            OutcomeForm::Table { table } => OutcomeForm::Table {
                table: table.map_values(|v| c * v + d),
            },
        };
        OutcomeBridge {
            form,
            diagnostics: BridgeDiagnostics::default(),
        }
    }
}

/// `q(s2, s1, a, x) = exp(s2ᵀβ₂ + s1ᵀβ₁ + xᵀβ₀ + γ_a) + c₀,ₐ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLinearArm {
    pub s2: Vec<f64>,
    pub s1: Vec<f64>,
    pub x: Vec<f64>,
    pub gamma: f64,
    #[serde(default)]
    pub offset: f64,
}

impl LogLinearArm {
    pub fn exponent(&self, s2: &[f64], s1: &[f64], x: &[f64]) -> f64 {
        dot(&self.s2, s2) + dot(&self.s1, s1) + dot(&self.x, x) + self.gamma
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum SelectionForm {
    Loglinear {
        arms: [LogLinearArm; 2],
    },
    Table {
        table: CellTable,
    },
    /// `q ≡ c_a`, used for forced reductions.
    Constant {
        values: [f64; 2],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionBridge {
    #[serde(flatten)]
    pub form: SelectionForm,
    #[serde(default)]
    pub diagnostics: BridgeDiagnostics,
}

impl SelectionBridge {
    pub fn loglinear(arms: [LogLinearArm; 2]) -> Self {
        SelectionBridge {
            form: SelectionForm::Loglinear { arms },
            diagnostics: BridgeDiagnostics::default(),
        }
    }

    pub fn table(table: CellTable) -> Self {
        SelectionBridge {
            form: SelectionForm::Table { table },
            diagnostics: BridgeDiagnostics::default(),
        }
    }

    pub fn constant(c: f64) -> Self {
        SelectionBridge {
            form: SelectionForm::Constant { values: [c, c] },
            diagnostics: BridgeDiagnostics::default(),
        }
    }

    pub fn eval(&self, s2: &[f64], s1: &[f64], a: u8, x: &[f64]) -> f64 {
        match &self.form {
            SelectionForm::Loglinear { arms } => {
                let t = &arms[a as usize];
                t.exponent(s2, s1, x).exp() + t.offset
            }
            SelectionForm::Table { table } => table.lookup(a, [s2, s1, x]),
            SelectionForm::Constant { values } => values[a as usize],
        }
    }

    pub fn eval_row(&self, r: &ObservationRow) -> f64 {
        self.eval(&r.s2, &r.s1, r.a, &r.x)
    }

    /// `c·q + d` in table or constant form. Log-linear bridges are kept in
    /// closed form by scaling the exponential part and shifting the offset.
    pub fn affine(&self, c: f64, d: f64) -> Self {
        let form = match &self.form {
            SelectionForm::Loglinear { arms } => {
                assert!(c > 0.0, "log-linear scaling needs c > 0");
                let f = |t: &LogLinearArm| LogLinearArm {
                    gamma: t.gamma + c.ln(),
                    offset: c * t.offset + d,
                    ..t.clone()
                };
                SelectionForm::Loglinear {
                    arms: [f(&arms[0]), f(&arms[1])],
                }
            }
            SelectionForm::Table { table } => SelectionForm::Table {
                table: table.map_values(|v| c * v + d),
            },
            SelectionForm::Constant { values } => SelectionForm::Constant {
                values: [c * values[0] + d, c * values[1] + d],
            },
        };
        SelectionBridge {
            form,
            diagnostics: BridgeDiagnostics::default(),
        }
    }
}
