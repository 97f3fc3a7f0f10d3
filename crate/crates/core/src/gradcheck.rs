//! Central finite-difference checks of analytic gradients.
//!
//! Each check reduces the quantity under test to a scalar, perturbs every
//! input scalar by `±h` and `±2h`, and compares the five-point central
//! difference against the tape's gradient using
//!
//! ```text
//! err = |analytic − numeric| / max(|analytic|, |numeric|, floor)
//! ```
//!
//! The floor keeps near-zero gradients from turning f32 rounding noise in
//! the numeric estimate into huge relative errors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{AttentionMask, Tape, Var};
use crate::bridge::BridgeConfig;
use crate::combined::{CombinedModel, LanguageModel};
use crate::data::{collate, gen_synthetic, ByteTokenizer, TaskMix, TokenBatch, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transformer::{StackConfig, TransformerStack};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckSettings {
    pub step: f32,
    pub floor: f64,
    pub tolerance: f64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings {
            step: 2e-2,
            floor: 1e-3,
            tolerance: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub checked: usize,
    pub max_err: f64,
    /// Location of the worst element, e.g. `"receiver.lm_head[17]"`.
    pub worst: String,
    pub passed: bool,
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<5} {:<28} {:>6} scalars  max err {:.2e}  at {}",
            if self.passed { "ok" } else { "FAIL" },
            self.name,
            self.checked,
            self.max_err,
            self.worst
        )
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

struct Tracker {
    name: String,
    settings: CheckSettings,
    checked: usize,
    max_err: f64,
    worst: String,
}

impl Tracker {
    fn new(name: &str, settings: CheckSettings) -> Self {
        Tracker {
            name: name.to_owned(),
            settings,
            checked: 0,
            max_err: 0.0,
            worst: "-".into(),
        }
    }

    fn record(&mut self, at: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = rel_err(analytic, numeric, self.settings.floor);
        self.checked += 1;
        if err > self.max_err || !err.is_finite() {
            self.max_err = err;
            self.worst = at();
        }
    }

    fn finish(self) -> CheckReport {
        CheckReport {
            passed: self.max_err <= self.settings.tolerance && self.checked > 0,
            name: self.name,
            checked: self.checked,
            max_err: self.max_err,
            worst: self.worst,
        }
    }
}

/// Checks `f` with respect to every scalar of every input. The output of `f`
/// is reduced with fixed pseudo-random weights so all output elements count.
pub fn check_function<F>(name: &str, inputs: &[Tensor], settings: CheckSettings, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], want_grads: bool| -> Result<(f64, Vec<Vec<f32>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
            .collect();
        let out = f(&mut tape, &vars)?;
        let n = tape.value(out).len();
        let loss = if n == 1 {
            out
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            let w = Tensor::randn(tape.shape(out), 1.0, &mut rng);
            let w = tape.constant(w.data().to_vec(), w.shape())?;
            let weighted = tape.mul(out, w)?;
            tape.sum(weighted)
        };
        if !want_grads {
            return Ok((reduce_f64(&tape, out), Vec::new()));
        }
        let grads = tape.backward(loss)?;
        let g = vars
            .iter()
            .zip(values)
            .map(|(&v, t)| grads.wrt(v).map_or_else(|| vec![0.0; t.numel()], <[f32]>::to_vec))
            .collect();
        Ok((0.0, g))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut tracker = Tracker::new(name, settings);
    let mut values = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for e in 0..grad.len() {
            let numeric = central(settings.step, |delta| {
                let orig = inputs[ti].data()[e];
                values[ti].data_mut()[e] = orig + delta;
                let v = eval(&values, false).map(|r| r.0);
                values[ti].data_mut()[e] = orig;
                v
            })?;
            tracker.record(|| format!("input{ti}[{e}]"), f64::from(grad[e]), numeric);
        }
    }
    Ok(tracker.finish())
}

/// The same weighted reduction as the tape's, accumulated in f64 so that the
/// rounding of a single f32 scalar does not dominate the difference quotient.
fn reduce_f64(tape: &Tape, out: Var) -> f64 {
    let values = tape.value(out);
    if values.len() == 1 {
        return f64::from(values[0]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(values.len() as u64);
    let w = Tensor::randn(tape.shape(out), 1.0, &mut rng);
    values
        .iter()
        .zip(w.data())
        .map(|(&x, &w)| f64::from(x) * f64::from(w))
        .sum()
}

/// Mean next-token cross-entropy from the model's f32 logits, in f64.
fn loss_f64<M: LanguageModel + ?Sized>(model: &M, batch: &TokenBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch.seq_batch())?;
    let labels = crate::combined::window_labels(batch, out.offset);
    let logits = tape.value(out.logits);
    let vocab = model.vocab_out();
    let (mut sum, mut count) = (0.0f64, 0usize);
    for (row, &label) in logits.chunks(vocab).zip(&labels) {
        if label < 0 {
            continue;
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(f64::from(b)));
        let lse = max + row.iter().map(|&x| (f64::from(x) - max).exp()).sum::<f64>().ln();
        sum += lse - f64::from(row[label as usize]);
        count += 1;
    }
    Ok(sum / count.max(1) as f64)
}

/// Five-point central difference, truncation error O(h⁴).
fn central(h: f32, mut f: impl FnMut(f32) -> Result<f64>) -> Result<f64> {
    let (p1, m1) = (f(h)?, f(-h)?);
    let (p2, m2) = (f(2.0 * h)?, f(-2.0 * h)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * f64::from(h)))
}

/// Checks the batch loss of `model` against every trainable parameter scalar.
pub fn check_model<M: LanguageModel + ?Sized>(
    name: &str,
    model: &mut M,
    batch: &TokenBatch,
    settings: CheckSettings,
) -> Result<CheckReport> {
    model.zero_grads();
    crate::train::accumulate_batch(model, batch)?;
    let mut analytic = Vec::new();
    for (si, (_, store)) in model.stores().into_iter().enumerate() {
        for (id, p) in store.iter().filter(|(_, p)| !p.is_frozen()) {
            let g = p.tensor.grad().ok_or_else(|| {
                Error::Contract(format!("trainable parameter {} has no gradient", p.name))
            })?;
            analytic.push((si, id, p.name.clone(), g.to_vec()));
        }
    }
    model.zero_grads();
    let mut tracker = Tracker::new(name, settings);
    for (si, id, pname, grad) in &analytic {
        for (e, &g) in grad.iter().enumerate() {
            let numeric = central(settings.step, |delta| {
                let orig = perturb(model, *si, *id, e, None);
                perturb(model, *si, *id, e, Some(orig + delta));
                let loss = loss_f64(model, batch);
                perturb(model, *si, *id, e, Some(orig));
                loss
            })?;
            tracker.record(|| format!("{pname}[{e}]"), f64::from(g), numeric);
        }
    }
    Ok(tracker.finish())
}

/// Returns the current value, writing `value` first when given.
fn perturb<M: LanguageModel + ?Sized>(
    model: &mut M,
    store: usize,
    id: crate::tensor::ParamId,
    e: usize,
    value: Option<f32>,
) -> f32 {
    let mut stores = model.stores_mut();
    let data = stores[store].1.get_mut(id).tensor.data_mut();
    if let Some(v) = value {
        data[e] = v;
    }
    data[e]
}

/// Named groups of checks runnable on their own.
pub const MODULES: [&str; 3] = ["ops", "transformer", "combined"];

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// One check per differentiable tape operation.
pub fn op_checks(settings: CheckSettings) -> Result<Vec<CheckReport>> {
    let r = rand_tensor;
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>| -> Result<()> {
        out.push(check_function(name, &inputs, settings, f)?);
        Ok(())
    };
    run("matmul", vec![r(&[3, 4], 1), r(&[4, 5], 2)], &|t, v| t.matmul(v[0], v[1]))?;
    run("add", vec![r(&[2, 3], 3), r(&[2, 3], 4)], &|t, v| t.add(v[0], v[1]))?;
    run("sub", vec![r(&[2, 3], 5), r(&[2, 3], 6)], &|t, v| t.sub(v[0], v[1]))?;
    run("mul", vec![r(&[2, 3], 7), r(&[2, 3], 8)], &|t, v| t.mul(v[0], v[1]))?;
    run("add_bias", vec![r(&[3, 4], 9), r(&[4], 10)], &|t, v| t.add_bias(v[0], v[1]))?;
    run("scale", vec![r(&[2, 3], 11)], &|t, v| Ok(t.scale(v[0], -1.7)))?;
    run("gelu", vec![r(&[2, 5], 12)], &|t, v| Ok(t.gelu(v[0])))?;
    run("sigmoid", vec![r(&[2, 5], 13)], &|t, v| Ok(t.sigmoid(v[0])))?;
    run("softmax", vec![r(&[3, 4], 14)], &|t, v| Ok(t.softmax(v[0])))?;
    run("layer_norm", vec![r(&[3, 6], 15), r(&[6], 16), r(&[6], 17)], &|t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    })?;
    run("embedding", vec![r(&[5, 3], 18)], &|t, v| t.embedding(v[0], &[4, 0, 4, 2]))?;
    run("concat_last", vec![r(&[3, 2], 19), r(&[3, 4], 20)], &|t, v| t.concat_last(v[0], v[1]))?;
    let pad = [false, false, true, false, false, false, true, true];
    run("attention", vec![r(&[8, 4], 21), r(&[8, 4], 22), r(&[8, 4], 23)], &move |t, v| {
        let mask = AttentionMask::causal(2, 4).and(&AttentionMask::key_padding(2, 4, &pad)?)?;
        t.attention(v[0], v[1], v[2], 2, &mask)
    })?;
    run("cross_attention", vec![r(&[6, 4], 24), r(&[10, 4], 25), r(&[10, 4], 26)], &|t, v| {
        t.attention(v[0], v[1], v[2], 2, &AttentionMask::aligned(2, 3, 5, 2))
    })?;
    run("cross_entropy", vec![r(&[4, 6], 27)], &|t, v| t.cross_entropy(v[0], &[1, -1, 5, 0]))?;
    run("sum", vec![r(&[2, 3], 28)], &|t, v| Ok(t.sum(v[0])))?;
    run("mean", vec![r(&[2, 3], 29)], &|t, v| Ok(t.mean(v[0])))?;
    Ok(out)
}

fn tiny_stack(max_len: usize) -> StackConfig {
    StackConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: VOCAB_SIZE,
        max_len,
    }
}

fn check_batch() -> Result<TokenBatch> {
    let examples = gen_synthetic(2, 11, TaskMix::default())?;
    let tok = ByteTokenizer;
    let short: Vec<_> = examples
        .iter()
        .map(|ex| crate::data::Example::new(&ex.prompt[..6], &ex.response[..4]))
        .collect::<Result<_>>()?;
    collate(&short, &tok)
}

/// Perturbs every parameter away from its initial value so that
/// zero-initialized projections do not hide gradient paths.
fn jitter<M: LanguageModel + ?Sized>(model: &mut M, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, store) in model.stores_mut() {
        for (_, p) in store.iter_mut() {
            let n = p.tensor.shape().to_vec();
            let noise = Tensor::randn(&n, 0.1, &mut rng);
            for (x, d) in p.tensor.data_mut().iter_mut().zip(noise.data()) {
                *x += d;
            }
        }
    }
}

/// A 2-layer d16 stack against its full loss.
pub fn transformer_check(settings: CheckSettings) -> Result<CheckReport> {
    let mut stack = TransformerStack::new(tiny_stack(32), 1)?;
    jitter(&mut stack, 2);
    check_model("transformer stack", &mut stack, &check_batch()?, settings)
}

/// Donor 2×d16, receiver 2×d16 and one bridge, against the combined loss.
pub fn combined_check(settings: CheckSettings) -> Result<CheckReport> {
    let mut bridge = BridgeConfig::default_for(2, 16, 2);
    bridge.placement = vec![1];
    let mut model = CombinedModel::new(tiny_stack(32), tiny_stack(32), bridge, 3)?;
    jitter(&mut model, 4);
    check_model("combined model", &mut model, &check_batch()?, settings)
}

/// Runs one named module, or all of them.
pub fn run(module: Option<&str>, settings: CheckSettings) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    let wanted = |m: &str| module.map_or(true, |w| w == m);
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(Error::Config(format!(
                "unknown gradcheck module {m:?}; expected one of {MODULES:?}"
            )));
        }
    }
    if wanted("ops") {
        reports.extend(op_checks(settings)?);
    }
    if wanted("transformer") {
        reports.push(transformer_check(settings)?);
    }
    if wanted("combined") {
        reports.push(combined_check(settings)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_err(1.0, 1.0, 1e-2), 0.0);
        assert!((rel_err(2.0, 1.0, 1e-2) - 0.5).abs() < 1e-12);
        assert!((rel_err(1e-6, 0.0, 1e-3) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn op_suite_passes() {
        for r in op_checks(CheckSettings::default()).unwrap() {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn unknown_module_is_config_error() {
        assert!(matches!(run(Some("nope"), CheckSettings::default()), Err(Error::Config(_))));
    }
}
