//! Local edits: a color constraint is satisfied by shifting the biases of
//! the few primitives that dominate the mixture at the constrained color.

use crate::color::Rgb;
use crate::glut::GlutModel;
use serde::{Deserialize, Serialize};

/// Selections whose summed weight falls below this are rejected.
pub const EDIT_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditConstraint {
    pub c_in: Rgb,
    pub c_out: Rgb,
    pub k: usize,
    pub strength: f64,
}

impl EditConstraint {
    pub fn new(c_in: Rgb, c_out: Rgb, k: usize, strength: f64) -> Self {
        EditConstraint {
            c_in,
            c_out,
            k,
            strength,
        }
    }

    pub fn validate(&self, n: usize) -> Result<(), EditError> {
        let in_box = |c: Rgb| c.to_array().iter().all(|v| (0.0..=1.0).contains(v));
        if !in_box(self.c_in) || !in_box(self.c_out) {
            return Err(EditError::ColorOutOfRange);
        }
        if self.k == 0 || self.k > n {
            return Err(EditError::KOutOfRange { k: self.k, n });
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(EditError::StrengthOutOfRange(self.strength));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub constraint: EditConstraint,
    /// Selected primitives, most influential first.
    pub touched: Vec<usize>,
    /// Weights of the touched primitives at `c_in`.
    pub weights: Vec<f64>,
    /// Normalized influence; sums to one.
    pub alphas: Vec<f64>,
    /// Bias increment `s·αₖ·δ` applied to each touched primitive.
    pub deltas: Vec<[f64; 3]>,
    /// Residual `δ` before the edit.
    pub residual: [f64; 3],
    /// `m = Σ wₖ αₖ`; the edit moves the output at `c_in` by `s·m·δ`.
    pub movement: f64,
    /// Biases of the touched primitives before the edit.
    pub prior_biases: Vec<[f64; 3]>,
    /// Hash of the touched biases right after the edit.
    pub lineage: u64,
}

impl EditRecord {
    /// Residual left at `c_in`: `(1 − s·m)·δ`.
    pub fn residual_after(&self) -> [f64; 3] {
        let f = 1.0 - self.constraint.strength * self.movement;
        self.residual.map(|d| f * d)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EditError {
    #[error("K = {k} outside 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("strength {0} outside [0, 1]")]
    StrengthOutOfRange(f64),
    #[error("constraint colors must lie in [0, 1]")]
    ColorOutOfRange,
    #[error("the {k} most influential primitives have total weight {sum:e} at this color; try a larger K")]
    Degenerate { k: usize, sum: f64 },
    #[error("edit record does not match the model's current state")]
    Lineage,
    #[error("nothing to undo")]
    EmptyJournal,
    #[error("journal line {line}: {message}")]
    Journal { line: usize, message: String },
}

/// `c_out − f(c_in)` with the unclamped mixture output.
pub fn residual(model: &GlutModel, c_in: Rgb, c_out: Rgb) -> [f64; 3] {
    let f = model.evaluate_unclamped(c_in);
    [c_out.r - f.r, c_out.g - f.g, c_out.b - f.b]
}

/// Indices of the `k` largest weights at `c`, largest first, ties to the
/// lower index.
pub fn select_topk(model: &GlutModel, c: Rgb, k: usize) -> Result<Vec<usize>, EditError> {
    if k == 0 || k > model.len() {
        return Err(EditError::KOutOfRange { k, n: model.len() });
    }
    let w = model.influence_weights(c).weights;
    Ok(topk_of(&w, k))
}

fn topk_of(w: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn lineage_hash(model: &GlutModel, touched: &[usize]) -> u64 {
    // FNV-1a over the bit patterns of the touched biases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &i in touched {
        h ^= i as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
        for v in model.local_bias(i) {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}

/// Applies the constraint in place and returns the record needed to
/// explain or undo it. Only biases of the selected primitives change.
pub fn apply_edit(model: &mut GlutModel, constraint: &EditConstraint) -> Result<EditRecord, EditError> {
    constraint.validate(model.len())?;
    let w = model.influence_weights(constraint.c_in).weights;
    let touched = topk_of(&w, constraint.k);
    let weights: Vec<f64> = touched.iter().map(|&i| w[i]).collect();
    let sum: f64 = weights.iter().sum();
    if sum < EDIT_EPSILON {
        return Err(EditError::Degenerate { k: constraint.k, sum });
    }
    let delta = residual(model, constraint.c_in, constraint.c_out);
    let alphas: Vec<f64> = weights.iter().map(|wk| wk / sum).collect();
    let movement = weights.iter().zip(&alphas).map(|(w, a)| w * a).sum();
    let s = constraint.strength;
    let mut deltas = Vec::with_capacity(touched.len());
    let mut prior_biases = Vec::with_capacity(touched.len());
    for (&i, &a) in touched.iter().zip(&alphas) {
        let d = delta.map(|v| s * a * v);
        let b = model.local_bias(i);
        prior_biases.push(b);
        model.set_local_bias(i, [b[0] + d[0], b[1] + d[1], b[2] + d[2]]);
        deltas.push(d);
    }
    let lineage = lineage_hash(model, &touched);
    Ok(EditRecord {
        constraint: *constraint,
        touched,
        weights,
        alphas,
        deltas,
        residual: delta,
        movement,
        prior_biases,
        lineage,
    })
}

/// Reverts `record`, restoring the prior biases bit for bit. Fails if the
/// touched biases changed since the edit.
pub fn undo(model: &mut GlutModel, record: &EditRecord) -> Result<(), EditError> {
    if record.touched.iter().any(|&i| i >= model.len()) || lineage_hash(model, &record.touched) != record.lineage {
        return Err(EditError::Lineage);
    }
    for (&i, &b) in record.touched.iter().zip(&record.prior_biases) {
        model.set_local_bias(i, b);
    }
    Ok(())
}

/// Output change caused by the edit at each probe color,
/// `Σₖ wₖ(c)·s·αₖ·δ`. Weights do not depend on biases, so the result is
/// the same whether `model` is taken before or after the edit.
pub fn edit_influence_map(model: &GlutModel, record: &EditRecord, probes: &[Rgb]) -> Vec<[f64; 3]> {
    let prep = model.prepare();
    probes
        .iter()
        .map(|&c| {
            let w = prep.weights(c).weights;
            let mut out = [0.0; 3];
            for (&i, d) in record.touched.iter().zip(&record.deltas) {
                for k in 0..3 {
                    out[k] += w[i] * d[k];
                }
            }
            out
        })
        .collect()
}

/// Ordered edit history supporting LIFO undo and JSON-lines persistence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EditJournal {
    pub records: Vec<EditRecord>,
}

impl EditJournal {
    pub fn apply(&mut self, model: &mut GlutModel, constraint: &EditConstraint) -> Result<&EditRecord, EditError> {
        let r = apply_edit(model, constraint)?;
        self.records.push(r);
        Ok(self.records.last().unwrap())
    }

    pub fn undo_last(&mut self, model: &mut GlutModel) -> Result<EditRecord, EditError> {
        let r = self.records.last().ok_or(EditError::EmptyJournal)?;
        undo(model, r)?;
        Ok(self.records.pop().unwrap())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("records serialize"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self, EditError> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| EditError::Journal {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(EditJournal { records })
    }

    /// Re-applies every recorded constraint to `model` in order.
    pub fn replay(&self, model: &mut GlutModel) -> Result<EditJournal, EditError> {
        let mut j = EditJournal::default();
        for r in &self.records {
            j.apply(model, &r.constraint)?;
        }
        Ok(j)
    }
}
