use std::ops::AddAssign;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale factors of the joint objective and the triplet margin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the detection loss in the total.
    pub total_d: f64,
    /// Weight of the recommendation (similar-case) loss in the total.
    pub total_scr: f64,
    /// Weight of the triplet term inside the detection loss.
    pub d_triplet: f64,
    /// Weight of the cross-entropy term inside the detection loss.
    pub d_ce: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            total_d: 0.3,
            total_scr: 0.7,
            d_triplet: 0.4,
            d_ce: 0.6,
            margin: 1.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.total_d, self.total_scr, self.d_triplet, self.d_ce];
        if all.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::Config("loss weights must lie in [0, 1]".into()));
        }
        if (self.total_d + self.total_scr - 1.0).abs() > 1e-9 || (self.d_triplet + self.d_ce - 1.0).abs() > 1e-9 {
            return Err(Error::Config("each pair of loss weights must sum to 1".into()));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("triplet margin must be positive, got {}", self.margin)));
        }
        Ok(())
    }
}

/// The individual terms of the joint objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_triplet_det: f64,
    pub l_ce: f64,
    pub l_d: f64,
    pub l_scr: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// Combines the three primitive terms into the detection and total losses.
    pub fn compose(l_triplet_det: f64, l_ce: f64, l_scr: f64, weights: &LossWeights) -> Self {
        let l_d = weights.d_triplet * l_triplet_det + weights.d_ce * l_ce;
        let l_total = weights.total_d * l_d + weights.total_scr * l_scr;
        Self {
            l_triplet_det,
            l_ce,
            l_d,
            l_scr,
            l_total,
        }
    }

    pub fn scaled(self, factor: f64) -> Self {
        Self {
            l_triplet_det: self.l_triplet_det * factor,
            l_ce: self.l_ce * factor,
            l_d: self.l_d * factor,
            l_scr: self.l_scr * factor,
            l_total: self.l_total * factor,
        }
    }
}

impl AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.l_triplet_det += o.l_triplet_det;
        self.l_ce += o.l_ce;
        self.l_d += o.l_d;
        self.l_scr += o.l_scr;
        self.l_total += o.l_total;
    }
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Domain(format!("embedding dimensions differ: {a} vs {b}")));
    }
    Ok(())
}

pub fn euclidean_distance<F: Float>(u: &[F], v: &[F]) -> Result<F> {
    check_dims(u.len(), v.len())?;
    Ok(u.iter()
        .zip(v)
        .fold(F::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b))
        .sqrt())
}

/// `max(d(a,p) − d(a,n) + margin, 0)`.
pub fn triplet_loss<F: Float>(a: &[F], p: &[F], n: &[F], margin: F) -> Result<F> {
    check_dims(a.len(), p.len())?;
    check_dims(a.len(), n.len())?;
    let v = euclidean_distance(a, p)? - euclidean_distance(a, n)? + margin;
    Ok(v.max(F::zero()))
}

/// Triplet loss and its gradients with respect to `(a, p, n)`.
///
/// The hinge corner and coincident points take the zero subgradient.
pub fn triplet_loss_with_grad<F: Float>(a: &[F], p: &[F], n: &[F], margin: F) -> Result<(F, [Vec<F>; 3])> {
    let loss = triplet_loss(a, p, n, margin)?;
    let dim = a.len();
    let mut grads = [vec![F::zero(); dim], vec![F::zero(); dim], vec![F::zero(); dim]];
    if loss <= F::zero() {
        return Ok((loss, grads));
    }
    let dp = euclidean_distance(a, p)?;
    let dn = euclidean_distance(a, n)?;
    for i in 0..dim {
        if dp > F::zero() {
            let g = (a[i] - p[i]) / dp;
            grads[0][i] = grads[0][i] + g;
            grads[1][i] = -g;
        }
        if dn > F::zero() {
            let g = (a[i] - n[i]) / dn;
            grads[0][i] = grads[0][i] - g;
            grads[2][i] = g;
        }
    }
    Ok((loss, grads))
}

pub fn softmax<F: Float>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum = exps.iter().copied().fold(F::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// `−log softmax(logits)[label]`, shifted by the largest logit.
pub fn cross_entropy<F: Float>(logits: &[F], label: usize) -> F {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = logits
        .iter()
        .fold(F::zero(), |acc, &z| acc + (z - max).exp())
        .ln()
        + max;
    lse - logits[label]
}

pub fn cross_entropy_with_grad<F: Float>(logits: &[F], label: usize) -> (F, Vec<F>) {
    let mut grad = softmax(logits);
    grad[label] = grad[label] - F::one();
    (cross_entropy(logits, label), grad)
}

/// Returns `z / ‖z‖` and `‖z‖` (guarded away from zero).
pub fn l2_normalize<F: Float>(z: &[F]) -> (Vec<F>, F) {
    let norm = z
        .iter()
        .fold(F::zero(), |acc, &v| acc + v * v)
        .sqrt()
        .max(F::from(1e-12).expect("representable"));
    (z.iter().map(|&v| v / norm).collect(), norm)
}

/// Pulls a gradient on `e = z/‖z‖` back to `z`: `(de − e⟨e, de⟩) / ‖z‖`.
pub fn l2_normalize_backward<F: Float>(e: &[F], norm: F, de: &[F]) -> Vec<F> {
    let dot = e.iter().zip(de).fold(F::zero(), |acc, (&a, &b)| acc + a * b);
    e.iter().zip(de).map(|(&ei, &di)| (di - ei * dot) / norm).collect()
}

/// Row-major `[2, dim]` classifier weights and their bias.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierView<'a, F> {
    pub weight: &'a [F],
    pub bias: &'a [F],
}

impl<F: Float> ClassifierView<'_, F> {
    pub fn logits(&self, e: &[F]) -> Vec<F> {
        let dim = e.len();
        self.bias
            .iter()
            .enumerate()
            .map(|(k, &b)| {
                self.weight[k * dim..(k + 1) * dim]
                    .iter()
                    .zip(e)
                    .fold(b, |acc, (&w, &x)| acc + w * x)
            })
            .collect()
    }
}

/// Gradients of one batch element's total loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ElementGrads<F> {
    /// With respect to the raw (pre-normalization) detection embeddings of anchor, positive, negative.
    pub det_raw: [Vec<F>; 3],
    pub rec_raw: [Vec<F>; 3],
    pub classifier_weight: Vec<F>,
    pub classifier_bias: Vec<F>,
}

/// Detection-triplet member labels: anchor and positive are NCP.
pub const DETECTION_TARGETS: [usize; 3] = [1, 1, 0];

/// Total loss of one (detection triplet, recommendation triplet) pair as a
/// function of the raw head outputs and the classifier.
pub fn element_loss<F: Float>(
    det_raw: [&[F]; 3],
    rec_raw: [&[F]; 3],
    classifier: ClassifierView<'_, F>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, ElementGrads<F>)> {
    let cast = |v: f64| F::from(v).expect("representable weight");
    let to64 = |v: F| v.to_f64().expect("finite loss");
    let margin = cast(weights.margin);
    let dim = det_raw[0].len();
    for z in det_raw.iter().chain(&rec_raw) {
        check_dims(dim, z.len())?;
    }
    if classifier.weight.len() != 2 * dim || classifier.bias.len() != 2 {
        return Err(Error::Domain(format!("classifier does not map {dim} features to 2 logits")));
    }

    let det: Vec<(Vec<F>, F)> = det_raw.iter().map(|z| l2_normalize(z)).collect();
    let rec: Vec<(Vec<F>, F)> = rec_raw.iter().map(|z| l2_normalize(z)).collect();

    let (l_trip_det, g_trip_det) = triplet_loss_with_grad(&det[0].0, &det[1].0, &det[2].0, margin)?;
    let (l_scr, g_scr) = triplet_loss_with_grad(&rec[0].0, &rec[1].0, &rec[2].0, margin)?;

    let w_d = cast(weights.total_d);
    let w_scr = cast(weights.total_scr);
    let w_dt = cast(weights.d_triplet);
    let w_ce = cast(weights.d_ce);
    let third = F::one() / cast(3.0);

    let mut classifier_weight = vec![F::zero(); 2 * dim];
    let mut classifier_bias = vec![F::zero(); 2];
    let mut l_ce = F::zero();
    let mut det_grads = Vec::with_capacity(3);
    for (m, (e, norm)) in det.iter().enumerate() {
        let logits = classifier.logits(e);
        let (ce, dlogits) = cross_entropy_with_grad(&logits, DETECTION_TARGETS[m]);
        l_ce = l_ce + ce * third;
        let ce_scale = w_d * w_ce * third;
        let mut de: Vec<F> = g_trip_det[m].iter().map(|&g| g * w_d * w_dt).collect();
        for (k, &dl) in dlogits.iter().enumerate() {
            let dl = dl * ce_scale;
            classifier_bias[k] = classifier_bias[k] + dl;
            let row = &classifier.weight[k * dim..(k + 1) * dim];
            for i in 0..dim {
                classifier_weight[k * dim + i] = classifier_weight[k * dim + i] + dl * e[i];
                de[i] = de[i] + dl * row[i];
            }
        }
        det_grads.push(l2_normalize_backward(e, *norm, &de));
    }
    let rec_grads: Vec<Vec<F>> = rec
        .iter()
        .zip(&g_scr)
        .map(|((e, norm), g)| {
            let de: Vec<F> = g.iter().map(|&v| v * w_scr).collect();
            l2_normalize_backward(e, *norm, &de)
        })
        .collect();

    let breakdown = LossBreakdown::compose(to64(l_trip_det), to64(l_ce), to64(l_scr), weights);
    Ok((
        breakdown,
        ElementGrads {
            det_raw: three(det_grads),
            rec_raw: three(rec_grads),
            classifier_weight,
            classifier_bias,
        },
    ))
}

fn three<T>(v: Vec<T>) -> [T; 3] {
    let mut it = v.into_iter();
    let mut next = || it.next().expect("three triplet members");
    [next(), next(), next()]
}
