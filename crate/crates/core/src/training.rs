//! Focal loss, Adam, the seeded training loop and checkpoint files.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::EfrInstance;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Scope};
use crate::model::{TgifConfig, TgifModel, Vocab};
use crate::taxonomy::LabelSpace;
use crate::tensor::{LossFn, ParamStore, Tape, Tensor, Var};

/// Lower clamp applied to `p_t` inside the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

fn check_focal_inputs(p: &Tensor, y: &Tensor, mask: &[bool]) -> Result<usize> {
    if p.shape() != y.shape() {
        return Err(Error::Shape {
            op: "focal_loss",
            lhs: p.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    if mask.len() != p.cols() {
        return Err(Error::Shape {
            op: "focal_loss:mask",
            lhs: p.shape().to_vec(),
            rhs: vec![mask.len()],
        });
    }
    let allowed = mask.iter().filter(|&&m| m).count();
    if allowed == 0 {
        return Err(Error::Invalid("focal loss over an all-masked label space".into()));
    }
    Ok(allowed * p.rows())
}

/// Per-coordinate term and its derivative with respect to `p`.
fn focal_term(p: f64, y: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    let positive = y > 0.5;
    let (pt, alpha_t, sign) = if positive {
        (p, alpha, 1.0)
    } else {
        (1.0 - p, 1.0 - alpha, -1.0)
    };
    let q = 1.0 - pt;
    let clamped = pt < LOG_CLAMP;
    let log_pt = pt.max(LOG_CLAMP).ln();
    let modulation = q.powf(gamma);
    let value = -alpha_t * modulation * log_pt;
    // d/dpt of -(1-pt)^γ log pt = γ(1-pt)^(γ-1) log pt - (1-pt)^γ / pt
    let d_mod = if gamma == 0.0 || (q == 0.0 && gamma > 1.0) {
        0.0
    } else if q == 0.0 {
        if gamma == 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        gamma * q.powf(gamma - 1.0)
    };
    let d_log = if clamped { 0.0 } else { modulation / pt };
    let d_pt = alpha_t * (d_mod * log_pt - d_log);
    (value, sign * d_pt)
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

/// Mean focal loss and its gradient with respect to `p`.
fn focal_with_grad(p: &Tensor, y: &Tensor, mask: &[bool], gamma: f64, alpha: f64, n: f64) -> (f64, Vec<f64>) {
    let l = p.cols();
    let mut terms = Vec::with_capacity(p.len());
    let mut local = vec![0.0; p.len()];
    for (i, (&p_i, &y_i)) in p.data().iter().zip(y.data()).enumerate() {
        if mask[i % l] {
            let (v, d) = focal_term(p_i, y_i, gamma, alpha);
            terms.push(v);
            local[i] = d / n;
        }
    }
    (compensated_sum(terms.into_iter()) / n, local)
}

/// Mean focal loss over the allowed coordinates of `p` against binary `y`.
pub fn focal_loss(p: &Tensor, y: &Tensor, mask: &[bool], gamma: f64, alpha: f64) -> Result<f64> {
    let n = check_focal_inputs(p, y, mask)?;
    Ok(focal_with_grad(p, y, mask, gamma, alpha, n as f64).0)
}

/// Records the focal loss of `p` on the tape. Masked coordinates receive
/// exactly zero gradient.
pub fn focal_loss_on(tape: &mut Tape<'_>, p: Var, y: &Tensor, mask: &[bool], gamma: f64, alpha: f64) -> Result<Var> {
    let n = check_focal_inputs(tape.value(p), y, mask)? as f64;
    let (y, mask) = (y.clone(), mask.to_vec());
    let f: LossFn = Arc::new(move |p: &Tensor| focal_with_grad(p, &y, &mask, gamma, alpha, n));
    Ok(tape.custom_loss(p, f))
}

/// Mean binary cross-entropy over allowed coordinates, with the same clamp.
pub fn binary_cross_entropy(p: &Tensor, y: &Tensor, mask: &[bool]) -> Result<f64> {
    let n = check_focal_inputs(p, y, mask)?;
    let l = p.cols();
    let mut total = 0.0;
    for (i, (&pv, &yv)) in p.data().iter().zip(y.data()).enumerate() {
        if mask[i % l] {
            let pt = if yv > 0.5 { pv } else { 1.0 - pv };
            total -= pt.max(LOG_CLAMP).ln();
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One bias-corrected Adam update, applied in lexicographic parameter order.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<()> {
    for name in params.names() {
        if !grads.contains_key(name) {
            return Err(Error::Runtime(format!("missing gradient for parameter `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (name, w) in params.iter_mut() {
        let g = &grads[name];
        if g.shape() != w.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: w.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(w.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(w.shape()));
        for (((wi, &gi), mi), vi) in w
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * gi;
            *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *wi -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Loss and parameter gradients of one instance, without dropout.
pub fn instance_gradients(model: &TgifModel, instance: &EfrInstance) -> Result<(f64, BTreeMap<String, Tensor>)> {
    instance_gradients_with(model, instance, None)
}

/// Loss and parameter gradients of one instance; dropout masks, if any,
/// come from `dropout`.
pub fn instance_gradients_with(
    model: &TgifModel,
    instance: &EfrInstance,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::with_params(&model.params);
    let p = model.forward_with(&mut tape, instance, dropout)?;
    let y = model.targets(instance);
    let mask = model.mask(instance)?;
    let loss = focal_loss_on(
        &mut tape,
        p,
        &y,
        &mask,
        model.config.focal_gamma,
        model.config.focal_alpha,
    )?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            instance_id: instance.instance_id.clone(),
        });
    }
    Ok((value, tape.backward(loss)?.into_params()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_wf1: Option<f64>,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log serializes")
    }
}

pub struct TrainOutcome {
    pub model: TgifModel,
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept, if any epoch ran.
    pub best_epoch: Option<usize>,
}

/// Dropout generator for training instance `index` in `epoch`: one stream
/// per (epoch, instance), so masks do not depend on batch order or threads.
pub fn dropout_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD20F_D20F_D20F_D20F);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Builds a model for `train` from `config` and trains it for `config.epochs`.
pub fn train(
    train_set: &[EfrInstance],
    dev_set: &[EfrInstance],
    config: &TgifConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let model = TgifModel::for_training(config.clone(), train_set, seed)?;
    train_model(model, train_set, dev_set)
}

/// Trains an initialized model. Instances are shuffled each epoch by a
/// generator derived from the model seed; per-instance gradients are
/// computed in parallel and summed in batch order, so results do not depend
/// on the number of worker threads. When `dev_set` is non-empty the
/// parameters from the epoch with the best dev weighted-F1 are kept;
/// otherwise the last epoch's.
pub fn train_model(mut model: TgifModel, train_set: &[EfrInstance], dev_set: &[EfrInstance]) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let epochs = model.config.epochs;
    let batch = model.config.batch_size;
    let hp = AdamParams {
        lr: model.config.learning_rate,
        ..AdamParams::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed ^ 0x5EED_5EED_5EED_5EED);
    let mut state = AdamState::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let results: Vec<(f64, BTreeMap<String, Tensor>)> = chunk
                .par_iter()
                .map(|&i| {
                    if model.config.dropout > 0.0 {
                        let mut rng = dropout_rng(model.seed, epoch, i);
                        instance_gradients_with(&model, &train_set[i], Some(&mut rng))
                    } else {
                        instance_gradients(&model, &train_set[i])
                    }
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / chunk.len() as f64;
            let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
            for (loss, grads) in results {
                total += loss;
                for (name, g) in grads {
                    match sum.get_mut(&name) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            sum.insert(name, g);
                        }
                    }
                }
            }
            for g in sum.values_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            adam_step(&mut model.params, &sum, &mut state, &hp)?;
        }
        let dev_wf1 = if dev_set.is_empty() {
            None
        } else {
            Some(evaluate(&model, dev_set, Scope::AllUtterances)?.weighted_f1)
        };
        log.push(EpochLog {
            epoch,
            train_loss: total / train_set.len() as f64,
            dev_wf1,
        });
        if let Some(score) = dev_wf1 {
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, epoch, model.params.clone()));
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params = params;
            Some(epoch)
        }
        None if epochs > 0 => Some(epochs),
        None => None,
    };
    Ok(TrainOutcome { model, log, best_epoch })
}

pub fn write_log(log: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for entry in log {
        text.push_str(&entry.to_json_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"TGIF-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: TgifConfig,
    label_space: LabelSpace,
    vocab: Vec<String>,
    seed: u64,
}

/// Serializes a model:
/// magic, `u32` version, `u64` header length, JSON header, `u64` tensor
/// count, then per tensor `u32` name length, name, `u32` rank, `u64` extents
/// and little-endian `f64` data. All integers are little-endian.
pub fn checkpoint_bytes(model: &TgifModel) -> Vec<u8> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        label_space: model.space.clone(),
        vocab: model.vocab.tokens().to_vec(),
        seed: model.seed,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated file while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        usize::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} {n} is too large")))
    }
}

pub fn model_from_checkpoint_bytes(bytes: &[u8]) -> Result<TgifModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len(), "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a TGIF checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file has {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = r.len("header length")?;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(header_len, "header")?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    header.config.validate()?;
    header.label_space.validate()?;
    let vocab = Vocab::from_saved(header.vocab)?;
    let count = r.len("tensor count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len("extent")?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
        let bytes_needed = n
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
        let raw = r.take(bytes_needed, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        params
            .insert(name.clone(), tensor)
            .map_err(|_| Error::Checkpoint(format!("duplicate tensor `{name}`")))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    let model = TgifModel {
        config: header.config,
        space: header.label_space,
        vocab,
        params,
        seed: header.seed,
    };
    model.check_shapes()?;
    Ok(model)
}

pub fn save_checkpoint(model: &TgifModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TgifModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_checkpoint_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_closed_form_example() {
        let p = Tensor::scalar(0.9);
        let y = Tensor::scalar(1.0);
        let got = focal_loss(&p, &y, &[true], 2.0, 0.25).unwrap();
        let expected = 0.25 * 0.01 * -(0.9f64.ln());
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 2.634e-4).abs() < 1e-7);
    }

    #[test]
    fn all_masked_is_an_error() {
        let p = Tensor::zeros(&[2, 3]);
        assert!(focal_loss(&p, &p, &[false; 3], 2.0, 0.25).is_err());
        assert!(focal_loss(&p, &Tensor::zeros(&[3, 2]), &[true; 2], 2.0, 0.25).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = ParamStore::new();
        params.insert("w".into(), Tensor::filled(&[2], 0.5)).unwrap();
        let before = params.clone();
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        let mut state = AdamState::default();
        adam_step(&mut params, &grads, &mut state, &AdamParams::default()).unwrap();
        assert_eq!(params, before);
        assert!(adam_step(&mut params, &BTreeMap::new(), &mut state, &AdamParams::default()).is_err());
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut params = ParamStore::new();
        params.insert("w".into(), Tensor::scalar(0.0)).unwrap();
        let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(3.0))]);
        let mut state = AdamState::default();
        let hp = AdamParams::default();
        let mut prev = 0.0;
        for _ in 0..200 {
            adam_step(&mut params, &grads, &mut state, &hp).unwrap();
            let now = params.get("w").unwrap().item();
            assert!(((prev - now) - hp.lr).abs() < 1e-6);
            prev = now;
        }
    }
}
