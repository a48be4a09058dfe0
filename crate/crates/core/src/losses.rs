//! Training objectives: hard and soft identity classification, margin triplet,
//! softmax-triplet and its soft-label form, and the mutual mean-teaching objective
//! that combines them.
//!
//! All losses are recorded on a [`Tape`] so they can be differentiated; teacher
//! quantities (soft class probabilities, soft triplet targets) enter as plain tensors and
//! never receive gradient.

use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, squared_distance, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{classify_on, encode_on, Network, NetworkPair, NetworkVars};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before every log.
pub const PROB_CLAMP: f64 = 1e-12;

/// Hardest positive and negative per anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiningResult {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl MiningResult {
    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn anchors(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Share of the identity loss carried by soft labels.
    pub lambda_id: f64,
    /// Share of the triplet loss carried by soft labels.
    pub lambda_tri: f64,
    /// Triplet weight in the source objective.
    pub lambda_s: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_id: 0.5,
            lambda_tri: 0.8,
            lambda_s: 1.0,
            margin: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.lambda_id) || !unit.contains(&self.lambda_tri) {
            return Err(Error::Config(format!(
                "lambda_id and lambda_tri must lie in [0, 1], got {} and {}",
                self.lambda_id, self.lambda_tri
            )));
        }
        if !(self.lambda_s >= 0.0) || !(self.margin >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_s and margin must be non-negative, got {} and {}",
                self.lambda_s, self.margin
            )));
        }
        Ok(())
    }
}

/// For every anchor, the farthest same-label sample and the nearest different-label
/// sample; ties go to the lowest index.
pub fn mine_hardest(features: &Tensor, labels: &[usize]) -> Result<MiningResult> {
    let b = features.rows();
    if labels.len() != b {
        return Err(Error::Mining(format!(
            "{} labels for {b} feature rows",
            labels.len()
        )));
    }
    let mut positives = Vec::with_capacity(b);
    let mut negatives = Vec::with_capacity(b);
    for i in 0..b {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..b {
            if j == i {
                continue;
            }
            let d = squared_distance(features.row(i), features.row(j));
            if labels[j] == labels[i] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        match (pos, neg) {
            (Some((p, _)), Some((n, _))) => {
                positives.push(p);
                negatives.push(n);
            }
            (None, _) => {
                return Err(Error::Mining(format!(
                    "label {} of anchor {i} occurs only once in the batch",
                    labels[i]
                )))
            }
            (_, None) => {
                return Err(Error::Mining("batch contains a single class".into()));
            }
        }
    }
    Ok(MiningResult {
        positives,
        negatives,
    })
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Numeric(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Numeric(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean of `-log p[i, label_i]`.
pub fn hard_ce_loss(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let p = tape.value(probs);
    p.require_rank("hard_ce_loss", 2)?;
    check_labels(labels, p.rows(), p.cols())?;
    let picked = tape.pick_columns(probs, labels)?;
    let logs = tape.log_clamped(picked, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let mean = tape.mean(logs);
    Ok(tape.scale(mean, -1.0))
}

/// Mean over rows of `-Σ_c teacher[i,c] · log student[i,c]`.
pub fn soft_ce_loss(tape: &mut Tape, student: Var, teacher: &Tensor) -> Result<Var> {
    let s = tape.value(student);
    s.require_rank("soft_ce_loss", 2)?;
    s.require_same_shape("soft_ce_loss", teacher)?;
    let rows = s.rows().max(1) as f64;
    let logs = tape.log_clamped(student, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let weighted = tape.mul_const(logs, teacher.clone())?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / rows))
}

/// Anchor–positive and anchor–negative distances, each `[B]`.
fn triplet_distances(tape: &mut Tape, features: Var, mining: &MiningResult) -> Result<(Var, Var)> {
    let b = tape.value(features).rows();
    if mining.len() != b {
        return Err(Error::Mining(format!(
            "mining covers {} anchors, batch has {b}",
            mining.len()
        )));
    }
    let anchors = tape.gather_rows(features, &mining.anchors())?;
    let pos = tape.gather_rows(features, &mining.positives)?;
    let neg = tape.gather_rows(features, &mining.negatives)?;
    let d_pos = tape.row_distance(anchors, pos)?;
    let d_neg = tape.row_distance(anchors, neg)?;
    Ok((d_pos, d_neg))
}

/// Mean of `max(0, d_p + margin - d_n)` over anchors.
pub fn hard_triplet_loss(tape: &mut Tape, features: Var, mining: &MiningResult, margin: f64) -> Result<Var> {
    let (d_pos, d_neg) = triplet_distances(tape, features, mining)?;
    let gap = tape.sub(d_pos, d_neg)?;
    let gap = tape.add_scalar(gap, margin);
    let hinge = tape.relu(gap);
    Ok(tape.mean(hinge))
}

/// `T_i = exp(d_n) / (exp(d_p) + exp(d_n))`, evaluated as `sigmoid(d_n - d_p)`; `[B]`.
pub fn softmax_triplet(tape: &mut Tape, features: Var, mining: &MiningResult) -> Result<Var> {
    let (d_pos, d_neg) = triplet_distances(tape, features, mining)?;
    let diff = tape.sub(d_neg, d_pos)?;
    Ok(tape.sigmoid(diff))
}

/// Plain-value `T_i` for teacher features, no tape.
pub fn softmax_triplet_values(features: &Tensor, mining: &MiningResult) -> Result<Vec<f64>> {
    if mining.len() != features.rows() {
        return Err(Error::Mining(format!(
            "mining covers {} anchors, batch has {}",
            mining.len(),
            features.rows()
        )));
    }
    Ok((0..mining.len())
        .map(|i| {
            let dp = squared_distance(features.row(i), features.row(mining.positives[i])).sqrt();
            let dn = squared_distance(features.row(i), features.row(mining.negatives[i])).sqrt();
            sigmoid(dn - dp)
        })
        .collect())
}

/// Binary cross-entropy of `t_student` against fixed targets, averaged.
fn bce_against(tape: &mut Tape, t_student: Var, targets: &[f64]) -> Result<Var> {
    let n = targets.len();
    let pos_w = Tensor::vector(targets.to_vec());
    let neg_w = Tensor::vector(targets.iter().map(|t| 1.0 - t).collect());
    let log_t = tape.log_clamped(t_student, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let flipped = tape.scale(t_student, -1.0);
    let one_minus = tape.add_scalar(flipped, 1.0);
    let log_1mt = tape.log_clamped(one_minus, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let a = tape.mul_const(log_t, pos_w)?;
    let b = tape.mul_const(log_1mt, neg_w)?;
    let s = tape.add(a, b)?;
    let total = tape.sum(s);
    Ok(tape.scale(total, -1.0 / n.max(1) as f64))
}

/// Mean of `-log T_i`: BCE against the hard target 1.
pub fn hard_softmax_triplet_loss(tape: &mut Tape, features: Var, mining: &MiningResult) -> Result<Var> {
    let t = softmax_triplet(tape, features, mining)?;
    let ones = vec![1.0; mining.len()];
    bce_against(tape, t, &ones)
}

/// BCE of the student's `T_i` against the teacher's `T_i`, both on the same triplets.
pub fn soft_softmax_triplet_loss(
    tape: &mut Tape,
    features: Var,
    teacher_t: &[f64],
    mining: &MiningResult,
) -> Result<Var> {
    if teacher_t.len() != mining.len() {
        return Err(Error::Numeric(format!(
            "{} soft triplet targets for {} anchors",
            teacher_t.len(),
            mining.len()
        )));
    }
    if let Some(bad) = teacher_t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Numeric(format!("soft triplet target {bad} outside (0, 1)")));
    }
    let t = softmax_triplet(tape, features, mining)?;
    bce_against(tape, t, teacher_t)
}

/// Source objective: `L_id + lambda_s · L_tri` with a margin triplet.
pub fn source_loss(
    tape: &mut Tape,
    vars: &NetworkVars,
    x: &Tensor,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<(Var, f64, f64)> {
    let xv = tape.constant(x.clone());
    let f = encode_on(tape, xv, vars)?;
    let p = classify_on(tape, f, vars)?;
    let mining = mine_hardest(tape.value(f), labels)?;
    let ce = hard_ce_loss(tape, p, labels)?;
    let tri = hard_triplet_loss(tape, f, &mining, weights.margin)?;
    let (ce_v, tri_v) = (tape.value(ce).item(), tape.value(tri).item());
    let scaled = tape.scale(tri, weights.lambda_s);
    let total = tape.add(ce, scaled)?;
    Ok((total, ce_v, tri_v))
}

/// The eight per-network terms of the mutual mean-teaching objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub id1: f64,
    pub id2: f64,
    pub sid1: f64,
    pub sid2: f64,
    pub tri1: f64,
    pub tri2: f64,
    pub stri1: f64,
    pub stri2: f64,
}

impl LossTerms {
    pub const NAMES: [&'static str; 8] = [
        "id1", "id2", "sid1", "sid2", "tri1", "tri2", "stri1", "stri2",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.id1, self.id2, self.sid1, self.sid2, self.tri1, self.tri2, self.stri1, self.stri2,
        ]
    }

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        (1.0 - w.lambda_id) * (self.id1 + self.id2)
            + w.lambda_id * (self.sid1 + self.sid2)
            + (1.0 - w.lambda_tri) * (self.tri1 + self.tri2)
            + w.lambda_tri * (self.stri1 + self.stri2)
    }
}

/// Where the teacher's soft triplet target takes its (positive, negative) pair from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMining {
    /// The student's mining indices.
    #[default]
    Shared,
    /// Hardest pairs mined in the teacher's own feature space.
    Own,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MmtOptions {
    /// Train only `net1`, taught by its own average model.
    pub single_network: bool,
    pub teacher_mining: TeacherMining,
}

/// One target mini-batch: both augmented views and the pseudo labels.
#[derive(Debug, Clone)]
pub struct MmtBatch {
    pub view1: Tensor,
    pub view2: Tensor,
    pub labels: Vec<usize>,
}

pub struct MmtLoss {
    pub total: Var,
    pub terms: LossTerms,
    pub vars1: NetworkVars,
    pub vars2: Option<NetworkVars>,
    /// Teacher class probabilities (avg1 on view1, avg2 on view2).
    pub teacher_probs: (Tensor, Tensor),
}

struct Student {
    features: Var,
    probs: Var,
    mining: MiningResult,
}

fn student_pass(tape: &mut Tape, net: &Network, x: &Tensor, labels: &[usize]) -> Result<(NetworkVars, Student)> {
    let vars = net.bind(tape, true);
    let xv = tape.constant(x.clone());
    let features = encode_on(tape, xv, &vars)?;
    let probs = classify_on(tape, features, &vars)?;
    let mining = mine_hardest(tape.value(features), labels)?;
    Ok((
        vars,
        Student {
            features,
            probs,
            mining,
        },
    ))
}

fn teacher_targets(
    teacher_features: &Tensor,
    student_mining: &MiningResult,
    labels: &[usize],
    mode: TeacherMining,
) -> Result<Vec<f64>> {
    match mode {
        TeacherMining::Shared => softmax_triplet_values(teacher_features, student_mining),
        TeacherMining::Own => {
            let own = mine_hardest(teacher_features, labels)?;
            softmax_triplet_values(teacher_features, &own)
        }
    }
}

struct TermVars {
    id: Var,
    sid: Var,
    tri: Var,
    stri: Var,
}

fn student_terms(
    tape: &mut Tape,
    student: &Student,
    labels: &[usize],
    teacher_probs: &Tensor,
    teacher_t: &[f64],
) -> Result<TermVars> {
    Ok(TermVars {
        id: hard_ce_loss(tape, student.probs, labels)?,
        sid: soft_ce_loss(tape, student.probs, teacher_probs)?,
        tri: hard_softmax_triplet_loss(tape, student.features, &student.mining)?,
        stri: soft_softmax_triplet_loss(tape, student.features, teacher_t, &student.mining)?,
    })
}

fn weighted(tape: &mut Tape, t: &TermVars, w: &LossWeights) -> Result<Var> {
    let parts = [
        (t.id, 1.0 - w.lambda_id),
        (t.sid, w.lambda_id),
        (t.tri, 1.0 - w.lambda_tri),
        (t.stri, w.lambda_tri),
    ];
    let mut acc: Option<Var> = None;
    for (v, c) in parts {
        let s = tape.scale(v, c);
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.expect("four parts"))
}

/// Records the full objective on `tape` with cross-supervision: `net1` learns from the
/// average of `net2` evaluated on the second view, and vice versa. Teacher passes run
/// off-tape so no gradient reaches the average models.
pub fn total_mmt_loss(
    tape: &mut Tape,
    pair: &NetworkPair,
    batch: &MmtBatch,
    weights: &LossWeights,
    options: &MmtOptions,
) -> Result<MmtLoss> {
    weights.validate()?;
    let labels = &batch.labels;

    let f_avg1 = pair.avg1.features(&batch.view1)?;
    let p_avg1 = crate::model::classify(&f_avg1, &pair.avg1.classifier)?;
    let (f_avg2, p_avg2) = if options.single_network {
        // self-teaching: net1's own average, on the other view
        let f = pair.avg1.features(&batch.view2)?;
        let p = crate::model::classify(&f, &pair.avg1.classifier)?;
        (f, p)
    } else {
        let f = pair.avg2.features(&batch.view2)?;
        let p = crate::model::classify(&f, &pair.avg2.classifier)?;
        (f, p)
    };

    let (vars1, s1) = student_pass(tape, &pair.net1, &batch.view1, labels)?;
    let t_for1 = teacher_targets(&f_avg2, &s1.mining, labels, options.teacher_mining)?;
    let terms1 = student_terms(tape, &s1, labels, &p_avg2, &t_for1)?;
    let mut total = weighted(tape, &terms1, weights)?;

    let mut terms = LossTerms {
        id1: tape.value(terms1.id).item(),
        sid1: tape.value(terms1.sid).item(),
        tri1: tape.value(terms1.tri).item(),
        stri1: tape.value(terms1.stri).item(),
        ..LossTerms::default()
    };

    let mut vars2 = None;
    if !options.single_network {
        let (v2, s2) = student_pass(tape, &pair.net2, &batch.view2, labels)?;
        let t_for2 = teacher_targets(&f_avg1, &s2.mining, labels, options.teacher_mining)?;
        let terms2 = student_terms(tape, &s2, labels, &p_avg1, &t_for2)?;
        let part2 = weighted(tape, &terms2, weights)?;
        total = tape.add(total, part2)?;
        terms.id2 = tape.value(terms2.id).item();
        terms.sid2 = tape.value(terms2.sid).item();
        terms.tri2 = tape.value(terms2.tri).item();
        terms.stri2 = tape.value(terms2.stri).item();
        vars2 = Some(v2);
    }

    Ok(MmtLoss {
        total,
        terms,
        vars1,
        vars2,
        teacher_probs: (p_avg1, p_avg2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use crate::model::Architecture;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn col(xs: &[f64]) -> Tensor {
        Tensor::matrix(xs.len(), 1, xs.to_vec()).unwrap()
    }

    fn rows(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(r, c, d.to_vec()).unwrap()
    }

    fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).item()
    }

    #[test]
    fn mining_examples() {
        let f = rows(4, 2, &[0., 0., 0., 0., 3., 4., 3., 4.]);
        let m = mine_hardest(&f, &[0, 0, 1, 1]).unwrap();
        assert_eq!(m.positives, vec![1, 0, 3, 2]);
        assert_eq!(m.negatives, vec![2, 2, 0, 0]);

        let m = mine_hardest(&col(&[0., 1., 10., 11.]), &[0, 0, 1, 1]).unwrap();
        assert_eq!((m.positives[0], m.negatives[0]), (1, 2));

        assert!(matches!(mine_hardest(&col(&[0., 1.]), &[0, 0]), Err(Error::Mining(_))));
        assert!(matches!(mine_hardest(&col(&[0., 1., 2.]), &[0, 0, 1]), Err(Error::Mining(_))));
    }

    #[test]
    fn hard_ce_examples() {
        let uniform = Tensor::full(&[2, 4], 0.25);
        let v = eval(|t| {
            let p = t.constant(uniform);
            hard_ce_loss(t, p, &[0, 3])
        });
        assert_abs_diff_eq!(v, 4f64.ln(), epsilon = 1e-12);

        let v = eval(|t| {
            let p = t.constant(rows(1, 2, &[1.0, 0.0]));
            hard_ce_loss(t, p, &[0])
        });
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-11);

        let v = eval(|t| {
            let p = t.constant(rows(1, 2, &[2. / 3., 1. / 3.]));
            hard_ce_loss(t, p, &[0])
        });
        assert_abs_diff_eq!(v, 1.5f64.ln(), epsilon = 1e-12);

        let mut tape = Tape::new();
        let p = tape.constant(rows(1, 2, &[0.5, 0.5]));
        assert!(hard_ce_loss(&mut tape, p, &[2]).is_err());
    }

    #[test]
    fn soft_ce_examples() {
        let student = rows(2, 3, &[0.2, 0.5, 0.3, 0.6, 0.1, 0.3]);
        let onehot = rows(2, 3, &[0., 1., 0., 1., 0., 0.]);
        let soft = eval(|t| {
            let s = t.constant(student.clone());
            soft_ce_loss(t, s, &onehot)
        });
        let hard = eval(|t| {
            let s = t.constant(student.clone());
            hard_ce_loss(t, s, &[1, 0])
        });
        assert_abs_diff_eq!(soft, hard, epsilon = 1e-15);

        let u = Tensor::full(&[3, 5], 0.2);
        let v = eval(|t| {
            let s = t.constant(u.clone());
            soft_ce_loss(t, s, &u)
        });
        assert_abs_diff_eq!(v, 5f64.ln(), epsilon = 1e-12);

        let v = eval(|t| {
            let s = t.constant(rows(1, 2, &[0.5, 0.5]));
            soft_ce_loss(t, s, &rows(1, 2, &[0.75, 0.25]))
        });
        assert_abs_diff_eq!(v, LN2, epsilon = 1e-12);

        let mut tape = Tape::new();
        let s = tape.constant(rows(1, 2, &[0.5, 0.5]));
        assert!(soft_ce_loss(&mut tape, s, &rows(1, 3, &[0.2, 0.3, 0.5])).is_err());
    }

    /// Four points on a rectangle where every anchor sees its positive at `dp` and its
    /// negative at `dn`.
    fn square(dp: f64, dn: f64) -> (Tensor, MiningResult) {
        let f = rows(4, 2, &[0.0, 0.0, dp, 0.0, 0.0, dn, dp, dn]);
        let mining = MiningResult {
            positives: vec![1, 0, 3, 2],
            negatives: vec![2, 3, 0, 1],
        };
        (f, mining)
    }

    fn hinge(dp: f64, dn: f64, m: f64) -> f64 {
        let (f, mining) = square(dp, dn);
        eval(|t| {
            let fv = t.constant(f);
            hard_triplet_loss(t, fv, &mining, m)
        })
    }

    #[test]
    fn hard_triplet_examples() {
        assert_eq!(hinge(0.2, 1.0, 0.5), 0.0);
        assert_abs_diff_eq!(hinge(0.7, 0.7, 0.5), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(hinge(0.9, 0.4, 0.5), 1.0, epsilon = 1e-12);
    }

    fn t_values(dp: f64, dn: f64) -> Vec<f64> {
        let (f, mining) = square(dp, dn);
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let t = softmax_triplet(&mut tape, fv, &mining).unwrap();
        let on_tape = tape.value(t).data().to_vec();
        assert_eq!(on_tape, softmax_triplet_values(&f, &mining).unwrap());
        on_tape
    }

    #[test]
    fn softmax_triplet_examples() {
        assert!(t_values(0.8, 0.8).iter().all(|&t| t == 0.5));
        for t in t_values(0.0, 3f64.ln()) {
            assert_abs_diff_eq!(t, 0.75, epsilon = 1e-15);
        }
        assert!(t_values(0.1, 800.0).iter().all(|&t| t > 1.0 - 1e-15));
        assert!(t_values(0.3, 0.5)[0] > 0.5 && t_values(0.5, 0.3)[0] < 0.5);
    }

    fn hard_stri(dp: f64, dn: f64) -> f64 {
        let (f, mining) = square(dp, dn);
        eval(|t| {
            let fv = t.constant(f);
            hard_softmax_triplet_loss(t, fv, &mining)
        })
    }

    #[test]
    fn hard_softmax_triplet_examples() {
        assert_abs_diff_eq!(hard_stri(0.6, 0.6), LN2, epsilon = 1e-12);
        assert!(hard_stri(0.0, 900.0) < 1e-11);
        assert_abs_diff_eq!(hard_stri(0.0, 3f64.ln()), -(0.75f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(hard_stri(0.0, 3f64.ln()), 0.287682072451781, epsilon = 1e-12);
    }

    #[test]
    fn soft_softmax_triplet_examples() {
        let f = rows(4, 2, &[0.0, 0.0, 0.3, 0.1, 2.0, 1.0, 2.5, 0.7]);
        let labels = [0, 0, 1, 1];
        let mining = mine_hardest(&f, &labels).unwrap();
        let hard = eval(|t| {
            let fv = t.constant(f.clone());
            hard_softmax_triplet_loss(t, fv, &mining)
        });
        let soft = eval(|t| {
            let fv = t.constant(f.clone());
            soft_softmax_triplet_loss(t, fv, &[1.0; 4], &mining)
        });
        assert_abs_diff_eq!(hard, soft, epsilon = 1e-12);

        // student T = 0.5 → ln 2 for any target
        let (even, m) = square(0.4, 0.4);
        for target in [0.5, 0.75] {
            let v = eval(|t| {
                let fv = t.constant(even.clone());
                soft_softmax_triplet_loss(t, fv, &[target; 4], &m)
            });
            assert_abs_diff_eq!(v, LN2, epsilon = 1e-12);
        }

        let mut tape = Tape::new();
        let fv = tape.constant(even.clone());
        assert!(matches!(
            soft_softmax_triplet_loss(&mut tape, fv, &[1.5; 4], &m),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            soft_softmax_triplet_loss(&mut tape, fv, &[f64::NAN; 4], &m),
            Err(Error::Numeric(_))
        ));
    }

    fn small_pair() -> NetworkPair {
        let arch = Architecture {
            input_dim: 5,
            hidden_dim: 6,
            feature_dim: 4,
            num_classes: 3,
        };
        let mut pair = NetworkPair::init(&arch, 10, 20).unwrap();
        // move the averages away from the networks
        pair.avg1 = crate::model::Network::init(&arch, 30);
        pair.avg2 = crate::model::Network::init(&arch, 40);
        pair
    }

    fn small_batch(seed: u64) -> MmtBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || Tensor::matrix(6, 5, (0..30).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        MmtBatch {
            view1: v(),
            view2: v(),
            labels: vec![0, 0, 1, 1, 2, 2],
        }
    }

    fn mmt_terms(weights: LossWeights, options: MmtOptions) -> (f64, LossTerms) {
        let pair = small_pair();
        let mut tape = Tape::new();
        let out = total_mmt_loss(&mut tape, &pair, &small_batch(1), &weights, &options).unwrap();
        (tape.value(out.total).item(), out.terms)
    }

    #[test]
    fn mmt_zero_lambdas_is_the_hard_label_baseline() {
        let w = LossWeights {
            lambda_id: 0.0,
            lambda_tri: 0.0,
            ..LossWeights::default()
        };
        let (total, t) = mmt_terms(w, MmtOptions::default());
        assert_abs_diff_eq!(total, t.id1 + t.id2 + t.tri1 + t.tri2, epsilon = 1e-12);
    }

    #[test]
    fn mmt_unit_lambdas_drop_hard_terms() {
        let w = LossWeights {
            lambda_id: 1.0,
            lambda_tri: 1.0,
            ..LossWeights::default()
        };
        let (total, t) = mmt_terms(w, MmtOptions::default());
        assert_abs_diff_eq!(total, t.sid1 + t.sid2 + t.stri1 + t.stri2, epsilon = 1e-12);
    }

    #[test]
    fn mmt_diagnostics_reweight_to_total() {
        let w = LossWeights::default();
        let (total, t) = mmt_terms(w, MmtOptions::default());
        assert_abs_diff_eq!(total, t.weighted_total(&w), epsilon = 1e-10);
        assert!(t.values().iter().all(|v| v.is_finite() && *v > 0.0));

        let (total, t) = mmt_terms(w, MmtOptions { single_network: true, ..Default::default() });
        assert_eq!((t.id2, t.sid2, t.tri2, t.stri2), (0.0, 0.0, 0.0, 0.0));
        assert_abs_diff_eq!(total, t.weighted_total(&w), epsilon = 1e-10);
    }

    #[test]
    fn mmt_cross_wiring_uses_peer_average_on_other_view() {
        let pair = small_pair();
        let batch = small_batch(2);
        let mut tape = Tape::new();
        let out = total_mmt_loss(&mut tape, &pair, &batch, &LossWeights::default(), &MmtOptions::default()).unwrap();
        let expected_teacher_for_net1 = pair.avg2.predict(&batch.view2).unwrap();
        assert_eq!(out.teacher_probs.1, expected_teacher_for_net1);
        // sid1 recomputed by hand from the peer teacher
        let p1 = pair.net1.predict(&batch.view1).unwrap();
        let manual = -(0..6)
            .map(|i| (0..3).map(|c| expected_teacher_for_net1.get(i, c) * p1.get(i, c).ln()).sum::<f64>())
            .sum::<f64>()
            / 6.0;
        assert_abs_diff_eq!(out.terms.sid1, manual, epsilon = 1e-12);
    }

    #[test]
    fn no_gradient_reaches_average_models() {
        let pair = small_pair();
        let batch = small_batch(3);
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let out = total_mmt_loss(&mut tape, &pair, &batch, &w, &MmtOptions::default()).unwrap();
        let before = tape.len();
        tape.backward(out.total).unwrap();
        assert_eq!(tape.len(), before);
        let g = tape.grad(out.vars1.w1).unwrap();
        assert!(g.data().iter().any(|&v| v != 0.0));

        // perturbing an average model changes the loss value, but averages are never
        // bound to the tape, so there is no gradient buffer to receive anything
        let mut perturbed = pair.clone();
        perturbed.avg2.encoder.w1.data_mut()[0] += 0.1;
        let mut t2 = Tape::new();
        let out2 = total_mmt_loss(&mut t2, &perturbed, &batch, &w, &MmtOptions::default()).unwrap();
        assert_ne!(t2.value(out2.total).item(), tape.value(out.total).item());
        let trainable: usize = (0..tape.len())
            .filter(|&i| {
                
                out.vars1.all().into_iter().chain(out.vars2.unwrap().all()).any(|p| p.index() == i)
            })
            .count();
        assert_eq!(trainable, 12);
    }

    fn random_features(rng: &mut impl Rng, b: usize, d: usize) -> Tensor {
        Tensor::matrix(b, d, (0..b * d).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    }

    fn random_stochastic(rng: &mut impl Rng, b: usize, m: usize) -> Tensor {
        let mut data = Vec::with_capacity(b * m);
        for _ in 0..b {
            let row: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum();
            data.extend(row.into_iter().map(|v| v / s));
        }
        Tensor::matrix(b, m, data).unwrap()
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let labels = [0, 0, 1, 1, 2, 2, 3, 3];
        for _ in 0..10 {
            let f = random_features(&mut rng, 8, 3);
            let mining = mine_hardest(&f, &labels).unwrap();
            let teacher_t: Vec<f64> = (0..8).map(|_| rng.gen_range(0.05..0.95)).collect();
            let logits = random_features(&mut rng, 8, 4);
            let teacher_p = random_stochastic(&mut rng, 8, 4);

            let e = grad_check(|t, x| hard_triplet_loss(t, x, &mining, 0.5).map_err(unwrap_tensor), &f, 1e-5).unwrap();
            assert!(e < 1e-4, "hard triplet {e}");
            let e = grad_check(|t, x| hard_softmax_triplet_loss(t, x, &mining).map_err(unwrap_tensor), &f, 1e-5).unwrap();
            assert!(e < 1e-4, "softmax triplet {e}");
            let e = grad_check(
                |t, x| soft_softmax_triplet_loss(t, x, &teacher_t, &mining).map_err(unwrap_tensor),
                &f,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-4, "soft softmax triplet {e}");
            let e = grad_check(
                |t, z| {
                    let p = t.row_softmax(z)?;
                    hard_ce_loss(t, p, &[0, 1, 2, 3, 0, 1, 2, 3]).map_err(unwrap_tensor)
                },
                &logits,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-4, "hard ce {e}");
            let e = grad_check(
                |t, z| {
                    let p = t.row_softmax(z)?;
                    soft_ce_loss(t, p, &teacher_p).map_err(unwrap_tensor)
                },
                &logits,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-4, "soft ce {e}");
        }
    }

    fn unwrap_tensor(e: Error) -> crate::error::TensorError {
        match e {
            Error::Tensor(t) => t,
            other => panic!("unexpected error {other}"),
        }
    }

    proptest! {
        #[test]
        fn gibbs_inequality(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_stochastic(&mut rng, 3, 5);
            let t = random_stochastic(&mut rng, 3, 5);
            let cross = eval(|tape| { let s = tape.constant(p.clone()); soft_ce_loss(tape, s, &t) });
            let entropy = eval(|tape| { let s = tape.constant(t.clone()); soft_ce_loss(tape, s, &t) });
            prop_assert!(cross >= entropy - 1e-12);
        }

        #[test]
        fn soft_triplet_with_unit_targets_is_hard(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_features(&mut rng, 6, 3);
            let mining = mine_hardest(&f, &[0, 0, 1, 1, 2, 2]).unwrap();
            let hard = eval(|t| { let v = t.constant(f.clone()); hard_softmax_triplet_loss(t, v, &mining) });
            let soft = eval(|t| { let v = t.constant(f.clone()); soft_softmax_triplet_loss(t, v, &[1.0; 6], &mining) });
            prop_assert!((hard - soft).abs() < 1e-12);
        }

        #[test]
        fn margin_triplet_vanishes_when_separated(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // classes on a line, 10 apart, jitter well below the margin gap
            let data: Vec<f64> = (0..6).map(|i| (i / 2) as f64 * 10.0 + rng.gen_range(0.0..0.5)).collect();
            let f = col(&data);
            let mining = mine_hardest(&f, &[0, 0, 1, 1, 2, 2]).unwrap();
            let v = eval(|t| { let x = t.constant(f.clone()); hard_triplet_loss(t, x, &mining, 0.5) });
            prop_assert_eq!(v, 0.0);
        }

        #[test]
        fn mining_picks_extremes(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_features(&mut rng, 8, 2);
            let labels = [0, 1, 2, 0, 1, 2, 0, 1];
            let m = mine_hardest(&f, &labels).unwrap();
            for i in 0..8 {
                let d = |j: usize| squared_distance(f.row(i), f.row(j));
                prop_assert_eq!(labels[m.positives[i]], labels[i]);
                prop_assert_ne!(labels[m.negatives[i]], labels[i]);
                for j in 0..8 {
                    if j == i { continue; }
                    if labels[j] == labels[i] { prop_assert!(d(j) <= d(m.positives[i])); }
                    else { prop_assert!(d(j) >= d(m.negatives[i])); }
                }
            }
        }
    }
}
