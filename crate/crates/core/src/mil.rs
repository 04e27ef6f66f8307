//! Gated-attention pooling, bag classification and the bag-level objectives.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Bag;
use crate::encoder::{Encoder, Reducer};
use crate::error::{argument, config, Result};
use crate::layers::{he_uniform, Linear};
use crate::params::Parameterized;
use crate::profile::Profile;
use crate::registry::Registry;
use crate::tensor::{log_sum_exp, matmul, matmul_a_bt, matmul_at_b_acc, sigmoid, softmax, Tensor};

/// Bias-free gated attention: `w · (tanh(V e) ⊙ σ(U e))`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub v: Tensor,
    pub u: Tensor,
    pub w: Tensor,
}

impl AttentionParams {
    pub fn new<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut v = Tensor::zeros("attention.v", &[hidden, dim]);
        let mut u = Tensor::zeros("attention.u", &[hidden, dim]);
        let mut w = Tensor::zeros("attention.w", &[hidden]);
        he_uniform(rng, &mut v.data, dim, 1.0);
        he_uniform(rng, &mut u.data, dim, 1.0);
        he_uniform(rng, &mut w.data, hidden, 1.0);
        Self { v, u, w }
    }

    pub fn dim(&self) -> usize {
        self.v.shape[1]
    }

    pub fn hidden(&self) -> usize {
        self.v.shape[0]
    }
}

impl Parameterized for AttentionParams {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.v, &self.u, &self.w]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.v, &mut self.u, &mut self.w]
    }
}

struct AttentionTape {
    input: Vec<f64>,
    tanh: Vec<f64>,
    sig: Vec<f64>,
    gated: Vec<f64>,
    mask: Option<Vec<f64>>,
    weights: Vec<f64>,
}

fn attention_forward(
    att: &AttentionParams,
    e: &[f64],
    n: usize,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> AttentionTape {
    let (h, d) = (att.hidden(), att.dim());
    let mut tanh = vec![0.0; n * h];
    let mut sig = vec![0.0; n * h];
    matmul_a_bt(e, &att.v.data, &mut tanh, n, d, h);
    matmul_a_bt(e, &att.u.data, &mut sig, n, d, h);
    tanh.iter_mut().for_each(|x| *x = x.tanh());
    sig.iter_mut().for_each(|x| *x = sigmoid(*x));
    let mut gated: Vec<f64> = tanh.iter().zip(&sig).map(|(t, s)| t * s).collect();
    let mask = dropout.and_then(|(p, rng)| {
        if p <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - p);
        let m: Vec<f64> = (0..n * h)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        gated.iter_mut().zip(&m).for_each(|(g, k)| *g *= k);
        Some(m)
    });
    let mut logits = vec![0.0; n];
    matmul(&gated, &att.w.data, &mut logits, n, h, 1);
    AttentionTape {
        input: e.to_vec(),
        tanh,
        sig,
        gated,
        mask,
        weights: softmax(&logits),
    }
}

/// Returns `d loss / d e` given `d loss / d a`.
fn attention_backward(
    att: &AttentionParams,
    tape: &AttentionTape,
    da: &[f64],
    n: usize,
    grads: &mut AttentionParams,
) -> Vec<f64> {
    let (h, d) = (att.hidden(), att.dim());
    let a = &tape.weights;
    let mean: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
    let dlogit: Vec<f64> = a.iter().zip(da).map(|(x, y)| x * (y - mean)).collect();
    matmul_at_b_acc(&dlogit, &tape.gated, &mut grads.w.data, n, 1, h);
    let mut dg = vec![0.0; n * h];
    matmul(&dlogit, &att.w.data, &mut dg, n, 1, h);
    if let Some(m) = &tape.mask {
        dg.iter_mut().zip(m).for_each(|(g, k)| *g *= k);
    }
    let mut dv = vec![0.0; n * h];
    let mut du = vec![0.0; n * h];
    for i in 0..n * h {
        let (t, s) = (tape.tanh[i], tape.sig[i]);
        dv[i] = dg[i] * s * (1.0 - t * t);
        du[i] = dg[i] * t * s * (1.0 - s);
    }
    matmul_at_b_acc(&dv, &tape.input, &mut grads.v.data, n, h, d);
    matmul_at_b_acc(&du, &tape.input, &mut grads.u.data, n, h, d);
    let mut de = vec![0.0; n * d];
    matmul(&dv, &att.v.data, &mut de, n, h, d);
    let mut tmp = vec![0.0; n * d];
    matmul(&du, &att.u.data, &mut tmp, n, h, d);
    de.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
    de
}

/// Softmax-normalized attention over the `n` rows of `e` (no dropout).
pub fn attention_weights(att: &AttentionParams, e: &[f64], n: usize) -> Result<Vec<f64>> {
    if n == 0 || e.len() != n * att.dim() {
        return Err(argument(format!(
            "attention expects a non-empty n×{} embedding matrix",
            att.dim()
        )));
    }
    Ok(attention_forward(att, e, n, None).weights)
}

/// `Σ_k a_k e_k`.
pub fn bag_embedding(weights: &[f64], e: &[f64], d: usize) -> Vec<f64> {
    let mut z = vec![0.0; d];
    matmul(weights, e, &mut z, 1, weights.len(), d);
    z
}

/// Two-logit scores and the positive-class probability.
pub fn classify_bag(classifier: &Linear, z: &[f64]) -> ([f64; 2], f64) {
    let s = classifier.forward(z);
    let scores = [s[0], s[1]];
    (scores, softmax(&scores)[1])
}

/// `τ · LSE_j((s_j + Δ·[j≠y]) / τ) − s_y` and its gradient in the scores.
pub fn smooth_svm_loss(scores: &[f64], label: usize, delta: f64, tau: f64) -> (f64, Vec<f64>) {
    let shifted: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(j, s)| (s + if j == label { 0.0 } else { delta }) / tau)
        .collect();
    let loss = tau * log_sum_exp(&shifted) - scores[label];
    let mut g = softmax(&shifted);
    g[label] -= 1.0;
    (loss, g)
}

/// `KL(a ‖ uniform) = Σ a_k ln(a_k N)` and its gradient in `a`.
pub fn kl_uniform(a: &[f64]) -> (f64, Vec<f64>) {
    let n = a.len() as f64;
    let mut loss = 0.0;
    let grad = a
        .iter()
        .map(|&x| {
            if x > 0.0 {
                let l = (x * n).ln();
                loss += x * l;
                l + 1.0
            } else {
                (f64::MIN_POSITIVE * n).ln() + 1.0
            }
        })
        .collect();
    (loss, grad)
}

/// `−log softmax(s)_y` and its gradient.
pub fn cross_entropy(scores: &[f64], label: usize) -> (f64, Vec<f64>) {
    let loss = log_sum_exp(scores) - scores[label];
    let mut g = softmax(scores);
    g[label] -= 1.0;
    (loss, g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub loss: f64,
    pub d_scores: Vec<f64>,
    /// Gradient with respect to the attention weights; `None` when the objective ignores them.
    pub d_attention: Option<Vec<f64>>,
}

/// Bag-level training objective.
pub trait MilObjective: Send + Sync {
    fn name(&self) -> String;
    fn evaluate(&self, scores: &[f64], label: usize, attention: &[f64]) -> ObjectiveValue;
}

pub struct CrossEntropy;

impl MilObjective for CrossEntropy {
    fn name(&self) -> String {
        "ce".into()
    }
    fn evaluate(&self, scores: &[f64], label: usize, _attention: &[f64]) -> ObjectiveValue {
        let (loss, d_scores) = cross_entropy(scores, label);
        ObjectiveValue {
            loss,
            d_scores,
            d_attention: None,
        }
    }
}

/// Smooth SVM plus `β · KL(a ‖ uniform)` on negative bags.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothSvmKl {
    pub delta: f64,
    pub tau: f64,
    pub beta: f64,
}

impl Default for SmoothSvmKl {
    fn default() -> Self {
        Self {
            delta: 1.0,
            tau: 1.0,
            beta: 0.5,
        }
    }
}

impl SmoothSvmKl {
    fn parse(arg: Option<&str>) -> Result<Self> {
        let mut out = Self::default();
        for part in arg.unwrap_or("").split(',').filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| config(format!("expected key=value, got '{part}'")))?;
            let v: f64 = v
                .parse()
                .map_err(|e| config(format!("bad value for {k}: {e}")))?;
            match k {
                "delta" => out.delta = v,
                "tau" => out.tau = v,
                "beta" => out.beta = v,
                _ => return Err(config(format!("unknown objective parameter '{k}'"))),
            }
        }
        if out.tau <= 0.0 || out.delta < 0.0 || out.beta < 0.0 {
            return Err(config("need tau > 0, delta ≥ 0, beta ≥ 0"));
        }
        Ok(out)
    }
}

impl MilObjective for SmoothSvmKl {
    fn name(&self) -> String {
        format!("svm-kl:delta={},tau={},beta={}", self.delta, self.tau, self.beta)
    }
    fn evaluate(&self, scores: &[f64], label: usize, attention: &[f64]) -> ObjectiveValue {
        let (mut loss, d_scores) = smooth_svm_loss(scores, label, self.delta, self.tau);
        let mut d_attention = None;
        if label == 0 && self.beta > 0.0 {
            let (kl, g) = kl_uniform(attention);
            loss += self.beta * kl;
            d_attention = Some(g.into_iter().map(|x| self.beta * x).collect());
        }
        ObjectiveValue {
            loss,
            d_scores,
            d_attention,
        }
    }
}

pub fn mil_objectives() -> Registry<dyn MilObjective> {
    let mut r: Registry<dyn MilObjective> = Registry::new("MIL objective");
    r.register("ce", "cross-entropy on the bag scores", |_| Ok(Box::new(CrossEntropy)));
    r.register(
        "svm-kl",
        "smooth SVM plus KL-to-uniform on negative bags (svm-kl:delta=1,tau=1,beta=0.5)",
        |arg| Ok(Box::new(SmoothSvmKl::parse(arg)?)),
    );
    r.register("r", "alias of svm-kl", |arg| Ok(Box::new(SmoothSvmKl::parse(arg)?)));
    r
}

/// Total bag loss under the chosen objective.
pub fn mil_loss(objective: &dyn MilObjective, scores: &[f64], label: bool, attention: &[f64]) -> f64 {
    objective.evaluate(scores, label as usize, attention).loss
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MilMode {
    /// Pretrained encoder fixed; a reducer, attention and classifier are trained.
    Frozen,
    /// Encoder trained end to end with attention and classifier.
    Finetune,
}

impl std::str::FromStr for MilMode {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Self::Frozen),
            "finetune" => Ok(Self::Finetune),
            _ => Err(config(format!("unknown MIL mode '{s}' (frozen, finetune)"))),
        }
    }
}

impl std::fmt::Display for MilMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Frozen => "frozen",
            Self::Finetune => "finetune",
        })
    }
}

/// Reducer (frozen mode only), attention and classifier.
#[derive(Clone, Debug)]
pub struct MilHead {
    pub reducer: Option<Reducer>,
    pub attention: AttentionParams,
    pub classifier: Linear,
}

pub struct HeadTape {
    reduced: Vec<f64>,
    raw: Vec<f64>,
    n: usize,
    att: AttentionTape,
    z: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BagOutput {
    pub scores: [f64; 2],
    pub prob: f64,
    pub attention: Vec<f64>,
}

impl MilHead {
    pub fn new<R: Rng>(profile: &Profile, mode: MilMode, rng: &mut R) -> Self {
        let d = profile.feature_dim();
        let (reducer, dim) = match mode {
            MilMode::Frozen => (Some(Reducer::new(d, profile.reduced_dim, rng)), profile.reduced_dim),
            MilMode::Finetune => (None, d),
        };
        Self {
            reducer,
            attention: AttentionParams::new(dim, profile.attention_hidden, rng),
            classifier: Linear::new("classifier", dim, 2, 1.0, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.reducer
            .as_ref()
            .map_or(self.attention.dim(), |r| r.in_dim())
    }

    pub fn forward(
        &self,
        e: &[f64],
        n: usize,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<(BagOutput, HeadTape)> {
        if n == 0 || e.len() != n * self.input_dim() {
            return Err(config(format!(
                "bag head expects n×{} embeddings, got {} values for {n} instances",
                self.input_dim(),
                e.len()
            )));
        }
        let reduced = match &self.reducer {
            Some(r) => r.linear.forward_batch(e, n),
            None => e.to_vec(),
        };
        let att = attention_forward(&self.attention, &reduced, n, dropout);
        let z = bag_embedding(&att.weights, &reduced, self.attention.dim());
        let (scores, prob) = classify_bag(&self.classifier, &z);
        let out = BagOutput {
            scores,
            prob,
            attention: att.weights.clone(),
        };
        Ok((
            out,
            HeadTape {
                reduced,
                raw: e.to_vec(),
                n,
                att,
                z,
            },
        ))
    }

    /// Accumulate head gradients; returns `d loss / d e` for the raw embeddings.
    pub fn backward(
        &self,
        tape: &HeadTape,
        d_scores: &[f64],
        d_attention: Option<&[f64]>,
        grads: &mut MilHead,
    ) -> Vec<f64> {
        let d = self.attention.dim();
        let n = tape.n;
        let dz = self
            .classifier
            .backward_batch(&tape.z, d_scores, 1, &mut grads.classifier);
        let mut da = vec![0.0; n];
        matmul_a_bt(&tape.reduced, &dz, &mut da, n, d, 1);
        if let Some(extra) = d_attention {
            da.iter_mut().zip(extra).for_each(|(x, y)| *x += y);
        }
        let mut de = attention_backward(&self.attention, &tape.att, &da, n, &mut grads.attention);
        for k in 0..n {
            let a = tape.att.weights[k];
            for (x, g) in de[k * d..(k + 1) * d].iter_mut().zip(&dz) {
                *x += a * g;
            }
        }
        match (&self.reducer, grads.reducer.as_mut()) {
            (Some(r), Some(gr)) => r.linear.backward_batch(&tape.raw, &de, n, &mut gr.linear),
            _ => de,
        }
    }
}

impl Parameterized for MilHead {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = self.reducer.as_ref().map_or(Vec::new(), |r| r.params());
        v.extend(self.attention.params());
        v.extend(self.classifier.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.reducer.as_mut().map_or(Vec::new(), |r| r.params_mut());
        v.extend(self.attention.params_mut());
        v.extend(self.classifier.params_mut());
        v
    }
}

/// The trainable part of a MIL run: the head, plus the encoder when fine-tuning.
#[derive(Clone, Debug)]
pub struct MilModel {
    pub mode: MilMode,
    pub encoder: Option<Encoder>,
    pub head: MilHead,
}

impl Parameterized for MilModel {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = self.encoder.as_ref().map_or(Vec::new(), |e| e.params());
        v.extend(self.head.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.encoder.as_mut().map_or(Vec::new(), |e| e.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}

/// Instance order used before pooling: sorted by patch origin.
pub fn canonical_order(bag: &Bag) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..bag.len()).collect();
    idx.sort_by_key(|&i| (bag.instances[i].origin, i));
    idx
}

/// Trainable parameter count of the bag model for a profile and mode.
pub fn count_trainable_params(profile: &Profile, mode: MilMode) -> usize {
    let d = profile.feature_dim();
    let h = profile.attention_hidden;
    let head = |dim: usize| 2 * h * dim + h + 2 * dim + 2;
    match mode {
        MilMode::Frozen => d * profile.reduced_dim + profile.reduced_dim + head(profile.reduced_dim),
        MilMode::Finetune => {
            let mut cin = 3;
            let mut enc = 0;
            for &w in &profile.encoder_widths {
                enc += 9 * cin * w + w;
                cin = w;
            }
            enc + head(d)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn paper_frozen_parameter_count() {
        let p = Profile::paper();
        assert_eq!(count_trainable_params(&p, MilMode::Frozen), 788_226);
        let head = MilHead::new(&p, MilMode::Frozen, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(head.param_count(), 788_226);
    }

    #[test]
    fn finetune_count_matches_model() {
        let p = Profile::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = MilModel {
            mode: MilMode::Finetune,
            encoder: Some(Encoder::new(&p, &mut rng)),
            head: MilHead::new(&p, MilMode::Finetune, &mut rng),
        };
        assert_eq!(m.param_count(), count_trainable_params(&p, MilMode::Finetune));
    }

    #[test]
    fn attention_examples() {
        let mut att = AttentionParams::new(2, 3, &mut ChaCha8Rng::seed_from_u64(1));
        att.w.data.fill(0.0);
        let e = vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0];
        let a = attention_weights(&att, &e, 3).unwrap();
        assert!(a.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        let a1 = attention_weights(&att, &e[..2], 1).unwrap();
        assert_eq!(a1, vec![1.0]);
        assert!(attention_weights(&att, &[], 0).is_err());
        assert_eq!(bag_embedding(&[0.0, 1.0, 0.0], &e, 2), vec![-1.0, 0.5]);
    }

    #[test]
    fn loss_closed_forms() {
        let (l, _) = smooth_svm_loss(&[0.3, 0.3], 1, 1.0, 1.0);
        assert!((l - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
        let (l, _) = smooth_svm_loss(&[2.0, -1.0], 0, 1.0, 1e-6);
        assert!(l.abs() < 1e-4);
        let (l, _) = smooth_svm_loss(&[0.0, 0.5], 0, 1.0, 1e-6);
        assert!((l - 1.5).abs() < 1e-4);
        assert_eq!(kl_uniform(&[0.25; 4]).0, 0.0);
        assert!((kl_uniform(&[1.0, 0.0, 0.0, 0.0]).0 - 4f64.ln()).abs() < 1e-12);
        let (ce, g) = cross_entropy(&[0.0, 0.0], 1);
        assert!((ce - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, vec![0.5, -0.5]);
    }

    #[test]
    fn kl_applies_to_negative_bags_only() {
        let obj = SmoothSvmKl::default();
        let a = [0.7, 0.2, 0.1];
        let pos = obj.evaluate(&[0.1, 0.4], 1, &a);
        let neg = obj.evaluate(&[0.1, 0.4], 0, &a);
        assert!(pos.d_attention.is_none());
        let (svm, _) = smooth_svm_loss(&[0.1, 0.4], 0, 1.0, 1.0);
        assert!((neg.loss - svm - 0.5 * kl_uniform(&a).0).abs() < 1e-15);
    }

    #[test]
    fn objective_registry() {
        let r = mil_objectives();
        assert_eq!(r.create("ce").unwrap().name(), "ce");
        let o = r.create("svm-kl:beta=0.25,tau=2").unwrap();
        assert_eq!(o.name(), "svm-kl:delta=1,tau=2,beta=0.25");
        assert!(r.create("r").is_ok());
        assert!(r.create("svm-kl:gamma=1").is_err());
        assert!(r.create("svm-kl:tau=0").is_err());
        assert!(r.create("hinge").is_err());
    }

    #[test]
    fn head_rejects_wrong_width() {
        let p = Profile::tiny();
        let head = MilHead::new(&p, MilMode::Frozen, &mut ChaCha8Rng::seed_from_u64(2));
        assert!(head.forward(&[0.0; 5], 1, None).is_err());
        assert!(head.forward(&[0.0; 4], 1, None).is_ok());
    }
}
