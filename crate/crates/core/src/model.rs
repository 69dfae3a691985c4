//! The TGIF network: four dialogue encoders, two-step fusion with the target
//! representation appended to every utterance, and a masked sigmoid head.
//!
//! Every parameter is created regardless of which encoders are enabled, so
//! models that differ only in `enabled_modules` share initial weights for a
//! given seed. A disabled encoder contributes a zero tensor of its usual shape.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EfrInstance, Emotion};
use crate::error::{Error, Result};
use crate::taxonomy::{allowed_mask, LabelSetup, LabelSpace, MaskMode, COUNT_MERGE_THRESHOLD};
use crate::tensor::layers::{self, ParamSpec};
use crate::tensor::{Init, ParamStore, Tape, Tensor, Var};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Module {
    #[serde(rename = "GUS")]
    Gus,
    #[serde(rename = "GES")]
    Ges,
    #[serde(rename = "SSES")]
    Sses,
    #[serde(rename = "GSS")]
    Gss,
}

impl Module {
    pub const ALL: [Module; 4] = [Module::Gus, Module::Ges, Module::Sses, Module::Gss];

    pub fn as_str(self) -> &'static str {
        match self {
            Module::Gus => "GUS",
            Module::Ges => "GES",
            Module::Sses => "SSES",
            Module::Gss => "GSS",
        }
    }
}

impl FromStr for Module {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "GUS" => Ok(Module::Gus),
            "GES" => Ok(Module::Ges),
            "SSES" => Ok(Module::Sses),
            "GSS" => Ok(Module::Gss),
            _ => Err(format!("unknown module `{s}`")),
        }
    }
}

/// How token embeddings are reduced to one vector per utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
}

/// Architecture and training hyperparameters. Serialized as the JSON config
/// file; unknown keys are rejected and missing keys take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TgifConfig {
    pub d_model: usize,
    pub heads: usize,
    pub transformer_layers: usize,
    pub d_ff: usize,
    pub gru_hidden: usize,
    pub fusion_hidden: Vec<usize>,
    pub max_tokens_per_utterance: usize,
    pub max_speakers_per_instance: usize,
    pub label_setup: LabelSetup,
    pub count_threshold: u64,
    pub mask_mode: MaskMode,
    pub decision_threshold: f64,
    pub enabled_modules: BTreeSet<Module>,
    pub positional_encoding: bool,
    pub pooling: Pooling,
    pub dropout: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TgifConfig {
    fn default() -> Self {
        TgifConfig {
            d_model: 64,
            heads: 4,
            transformer_layers: 1,
            d_ff: 128,
            gru_hidden: 64,
            fusion_hidden: vec![128, 64],
            max_tokens_per_utterance: 50,
            max_speakers_per_instance: 8,
            label_setup: LabelSetup::Fine27,
            count_threshold: COUNT_MERGE_THRESHOLD,
            mask_mode: MaskMode::Polarity,
            decision_threshold: 0.5,
            enabled_modules: Module::ALL.into_iter().collect(),
            positional_encoding: true,
            pooling: Pooling::Mean,
            dropout: 0.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 100,
        }
    }
}

impl TgifConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: TgifConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_ff == 0 || self.gru_hidden == 0 || self.max_tokens_per_utterance == 0 {
            return bad("d_ff, gru_hidden and max_tokens_per_utterance must be positive".into());
        }
        if self.max_speakers_per_instance == 0 {
            return bad("max_speakers_per_instance must be positive".into());
        }
        if self.fusion_hidden.contains(&0) {
            return bad("fusion_hidden sizes must be positive".into());
        }
        if !self.enabled_modules.contains(&Module::Gus) {
            return bad("GUS must be enabled".into());
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return bad(format!(
                "decision_threshold {} is outside (0, 1)",
                self.decision_threshold
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} is outside [0, 1)", self.dropout));
        }
        if !(self.focal_gamma >= 0.0) || !(0.0..=1.0).contains(&self.focal_alpha) {
            return bad("focal_gamma must be >= 0 and focal_alpha in [0, 1]".into());
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return bad("learning_rate and batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn enabled(&self, module: Module) -> bool {
        self.enabled_modules.contains(&module)
    }

    /// Width of `x_i = z_i ⊕ z_T`.
    pub fn fusion_input_dim(&self) -> usize {
        2 * (self.d_model + self.gru_hidden)
    }
}

/// Lowercased whitespace tokens, truncated to `max_tokens`.
pub fn tokenize(text: &str, max_tokens: usize) -> Vec<String> {
    text.split_whitespace()
        .take(max_tokens)
        .map(str::to_lowercase)
        .collect()
}

/// Token vocabulary with `<pad>` at 0 and `<unk>` at 1; the rest sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(words: impl IntoIterator<Item = String>) -> Self {
        let set: BTreeSet<String> = words.into_iter().filter(|w| w != PAD && w != UNK).collect();
        let tokens: Vec<String> = [PAD.to_string(), UNK.to_string()].into_iter().chain(set).collect();
        Self::from_list(tokens)
    }

    fn from_list(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    /// Vocabulary of every utterance in `instances`.
    pub fn build(instances: &[EfrInstance], max_tokens: usize) -> Self {
        Self::from_tokens(
            instances
                .iter()
                .flat_map(|i| &i.utterances)
                .flat_map(|u| tokenize(&u.text, max_tokens)),
        )
    }

    /// Restores a vocabulary saved with [`Vocab::tokens`].
    pub fn from_saved(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD || tokens[UNK_ID] != UNK {
            return Err(Error::Checkpoint("vocabulary must start with <pad>, <unk>".into()));
        }
        let v = Self::from_list(tokens);
        if v.index.len() != v.tokens.len() {
            return Err(Error::Checkpoint("vocabulary has duplicate tokens".into()));
        }
        Ok(v)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    /// Token ids of an utterance; an empty utterance is a single `<pad>`.
    pub fn encode(&self, text: &str, max_tokens: usize) -> Vec<usize> {
        let ids: Vec<usize> = tokenize(text, max_tokens).iter().map(|t| self.id(t)).collect();
        if ids.is_empty() {
            vec![PAD_ID]
        } else {
            ids
        }
    }
}

/// Parameter names, shapes and initializers for a configuration.
pub fn param_specs(config: &TgifConfig, vocab_size: usize, labels: usize) -> Vec<ParamSpec> {
    let d = config.d_model;
    let h = config.gru_hidden;
    let mut specs = vec![("gus.embedding".to_string(), vec![vocab_size, d], Init::Xavier)];
    specs.extend(layers::encoder_specs(
        "gus.encoder",
        config.transformer_layers,
        d,
        config.d_ff,
    ));
    specs.extend(layers::gru_specs("ges.gru", Emotion::COUNT, h));
    for k in 0..config.max_speakers_per_instance {
        specs.extend(layers::gru_specs(&sses_prefix(k), Emotion::COUNT, h));
    }
    specs.extend(layers::linear_specs("gss.proj", config.max_speakers_per_instance, d));
    specs.extend(layers::encoder_specs(
        "gss.encoder",
        config.transformer_layers,
        d,
        config.d_ff,
    ));
    specs.extend(layers::linear_specs("fusion.a", 2 * d, d));
    specs.extend(layers::linear_specs("fusion.b", 2 * h, h));
    let mut width = config.fusion_input_dim();
    for (i, &next) in config.fusion_hidden.iter().enumerate() {
        specs.extend(layers::linear_specs(&format!("head.hidden{i}"), width, next));
        width = next;
    }
    specs.extend(layers::linear_specs("head.out", width, labels));
    specs
}

fn sses_prefix(k: usize) -> String {
    format!("sses.gru{k}")
}

/// Speaker slot of every utterance, numbering speakers by first appearance.
pub fn speaker_slots(instance: &EfrInstance) -> Vec<usize> {
    let mut seen: Vec<&str> = Vec::new();
    instance
        .utterances
        .iter()
        .map(|u| match seen.iter().position(|s| *s == u.speaker) {
            Some(k) => k,
            None => {
                seen.push(&u.speaker);
                seen.len() - 1
            }
        })
        .collect()
}

/// Probabilities and decisions for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub instance_id: String,
    /// `[t, L]`; exactly zero wherever `mask` is false.
    pub probs: Tensor,
    pub predicted: Vec<BTreeSet<usize>>,
    pub mask: Vec<bool>,
}

#[derive(Serialize)]
struct UtteranceLine<'a> {
    index: usize,
    probs: &'a [f64],
    predicted: Vec<&'a str>,
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    instance_id: &'a str,
    per_utterance: Vec<UtteranceLine<'a>>,
    mask: &'a [bool],
}

impl Prediction {
    pub fn to_json_line(&self, space: &LabelSpace) -> String {
        let line = PredictionLine {
            instance_id: &self.instance_id,
            per_utterance: self
                .predicted
                .iter()
                .enumerate()
                .map(|(i, set)| UtteranceLine {
                    index: i,
                    probs: self.probs.row(i),
                    predicted: set.iter().map(|&l| space.label(l)).collect(),
                })
                .collect(),
            mask: &self.mask,
        };
        serde_json::to_string(&line).expect("prediction serializes")
    }

    /// Gold versus predicted instigators per utterance, as an aligned table.
    pub fn to_table(&self, instance: &EfrInstance, space: &LabelSpace) -> String {
        let names = |set: &BTreeSet<usize>| {
            if set.is_empty() {
                "-".to_string()
            } else {
                set.iter().map(|&l| space.label(l)).collect::<Vec<_>>().join(", ")
            }
        };
        let rows: Vec<[String; 5]> = instance
            .utterances
            .iter()
            .zip(&self.predicted)
            .enumerate()
            .map(|(i, (u, pred))| {
                let gold = space.project(&instance.instigators[i]);
                [
                    format!("u{}", i + 1),
                    u.speaker.clone(),
                    u.emotion.to_string(),
                    names(&gold),
                    names(pred),
                ]
            })
            .collect();
        let header = ["utt", "speaker", "emotion", "actual", "predicted"];
        let mut widths = header.map(str::len);
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{}  ({} -> {}, target u{})",
            instance.instance_id,
            instance.source_emotion,
            instance.target_emotion,
            instance.target_index + 1
        );
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let _ = writeln!(out, "{}", line(&header.map(String::from)));
        for row in &rows {
            let _ = writeln!(out, "{}", line(row));
        }
        out
    }
}

/// A TGIF network with its vocabulary, label space and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TgifModel {
    pub config: TgifConfig,
    pub space: LabelSpace,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub seed: u64,
}

impl TgifModel {
    pub fn new(config: TgifConfig, space: LabelSpace, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        space.validate()?;
        let specs = param_specs(&config, vocab.len(), space.dim());
        let params = ParamStore::initialize(&specs, seed)?;
        Ok(TgifModel {
            config,
            space,
            vocab,
            params,
            seed,
        })
    }

    /// Builds the vocabulary and label space from `train` and initializes.
    pub fn for_training(config: TgifConfig, train: &[EfrInstance], seed: u64) -> Result<Self> {
        let space = LabelSpace::for_setup(config.label_setup, train, config.count_threshold)?;
        let vocab = Vocab::build(train, config.max_tokens_per_utterance);
        Self::new(config, space, vocab, seed)
    }

    /// Checks that stored tensors match the shapes implied by the config.
    pub fn check_shapes(&self) -> Result<()> {
        let specs = param_specs(&self.config, self.vocab.len(), self.space.dim());
        if specs.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.params.len()
            )));
        }
        for (name, shape, _) in &specs {
            let t = self
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for tensor `{name}`: stored {:?}, config implies {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    /// Errors unless this model predicts over `expected`.
    pub fn ensure_label_space(&self, expected: &LabelSpace) -> Result<()> {
        if &self.space != expected {
            return Err(Error::Config(format!(
                "label-space mismatch: model predicts {} ({} labels), evaluation expects {} ({} labels)",
                self.space.setup().as_str(),
                self.space.dim(),
                expected.setup().as_str(),
                expected.dim()
            )));
        }
        Ok(())
    }

    pub fn mask(&self, instance: &EfrInstance) -> Result<Vec<bool>> {
        allowed_mask(
            instance.source_emotion,
            instance.target_emotion,
            &self.space,
            self.config.mask_mode,
        )
    }

    /// Binary gold matrix `[t, L]` for an instance.
    pub fn targets(&self, instance: &EfrInstance) -> Tensor {
        let l = self.space.dim();
        let mut y = Tensor::zeros(&[instance.len(), l]);
        for (i, set) in instance.instigators.iter().enumerate() {
            for k in self.space.project(set) {
                y.data_mut()[i * l + k] = 1.0;
            }
        }
        y
    }

    fn emotion_one_hots(instance: &EfrInstance) -> Tensor {
        let rows: Vec<Vec<f64>> = instance
            .utterances
            .iter()
            .map(|u| u.emotion.one_hot().to_vec())
            .collect();
        Tensor::from_rows(&rows).expect("non-empty instance")
    }

    fn zeros(tape: &mut Tape<'_>, t: usize, width: usize) -> Var {
        tape.constant(Tensor::zeros(&[t, width]))
    }

    fn check_speakers(&self, instance: &EfrInstance) -> Result<Vec<usize>> {
        let slots = speaker_slots(instance);
        let distinct = slots.iter().max().map_or(0, |m| m + 1);
        if distinct > self.config.max_speakers_per_instance {
            return Err(Error::Invalid(format!(
                "instance {} has {distinct} speakers, more than max_speakers_per_instance = {}",
                instance.instance_id, self.config.max_speakers_per_instance
            )));
        }
        Ok(slots)
    }

    /// Utterance encoder: pooled token embeddings through `T_u`, `[t, d_model]`.
    pub fn encode_gus(&self, tape: &mut Tape<'_>, instance: &EfrInstance) -> Result<Var> {
        let t = instance.len();
        let mut ids = Vec::new();
        let mut pool = Vec::with_capacity(t);
        for u in &instance.utterances {
            let utt = self.vocab.encode(&u.text, self.config.max_tokens_per_utterance);
            pool.push((ids.len(), utt.len()));
            ids.extend(utt);
        }
        let mut weights = Tensor::zeros(&[t, ids.len()]);
        for (i, &(start, len)) in pool.iter().enumerate() {
            for j in start..start + len {
                weights.data_mut()[i * ids.len() + j] = 1.0 / len as f64;
            }
        }
        let table = tape.param("gus.embedding")?;
        let embedded = tape.embedding_lookup(table, &ids)?;
        let w = tape.constant(weights);
        let pooled = tape.matmul(w, embedded)?;
        layers::transformer_encoder(
            tape,
            pooled,
            "gus.encoder",
            self.config.transformer_layers,
            self.config.heads,
            self.config.positional_encoding,
        )
    }

    /// Global emotion GRU, `[t, gru_hidden]`.
    pub fn encode_ges(&self, tape: &mut Tape<'_>, instance: &EfrInstance) -> Result<Var> {
        let x = tape.constant(Self::emotion_one_hots(instance));
        layers::gru_sequence(tape, x, "ges.gru", self.config.gru_hidden)
    }

    /// Per-speaker emotion GRUs re-interleaved into utterance order, `[t, gru_hidden]`.
    pub fn encode_sses(&self, tape: &mut Tape<'_>, instance: &EfrInstance) -> Result<Var> {
        let slots = self.check_speakers(instance)?;
        let speakers = slots.iter().max().map_or(0, |m| m + 1);
        let x = tape.constant(Self::emotion_one_hots(instance));
        let mut blocks = Vec::with_capacity(speakers);
        let mut position = vec![0usize; slots.len()];
        let mut offset = 0;
        for k in 0..speakers {
            let rows: Vec<usize> = (0..slots.len()).filter(|&i| slots[i] == k).collect();
            for (j, &i) in rows.iter().enumerate() {
                position[i] = offset + j;
            }
            offset += rows.len();
            let seq = tape.gather_rows(x, &rows)?;
            blocks.push(layers::gru_sequence(
                tape,
                seq,
                &sses_prefix(k),
                self.config.gru_hidden,
            )?);
        }
        let stacked = if blocks.len() == 1 {
            blocks[0]
        } else {
            tape.concat_rows(&blocks)?
        };
        tape.gather_rows(stacked, &position)
    }

    /// Speaker-sequence encoder over first-appearance one-hots, `[t, d_model]`.
    pub fn encode_gss(&self, tape: &mut Tape<'_>, instance: &EfrInstance) -> Result<Var> {
        let slots = self.check_speakers(instance)?;
        let width = self.config.max_speakers_per_instance;
        let mut onehot = Tensor::zeros(&[slots.len(), width]);
        for (i, &k) in slots.iter().enumerate() {
            onehot.data_mut()[i * width + k] = 1.0;
        }
        let x = tape.constant(onehot);
        let projected = layers::linear(tape, x, "gss.proj")?;
        layers::transformer_encoder(
            tape,
            projected,
            "gss.encoder",
            self.config.transformer_layers,
            self.config.heads,
            self.config.positional_encoding,
        )
    }

    /// Fusion and output head. Returns masked probabilities `[t, L]`. With
    /// `dropout` set, the fusion input and every hidden layer are dropped at
    /// `config.dropout` using masks drawn from that generator.
    #[allow(clippy::too_many_arguments)]
    pub fn fuse_and_predict(
        &self,
        tape: &mut Tape<'_>,
        h_u: Var,
        h_s: Var,
        h_e: Var,
        h_hat: Var,
        target_index: usize,
        mask: &[bool],
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let t = tape.value(h_u).rows();
        let d = self.config.d_model;
        let h = self.config.gru_hidden;
        for (op, v, width) in [
            ("fuse:h_u", h_u, d),
            ("fuse:h_s", h_s, d),
            ("fuse:h_e", h_e, h),
            ("fuse:h_hat", h_hat, h),
        ] {
            if tape.shape(v) != [t, width] {
                return Err(Error::Shape {
                    op,
                    lhs: tape.shape(v).to_vec(),
                    rhs: vec![t, width],
                });
            }
        }
        if target_index >= t || mask.len() != self.space.dim() {
            return Err(Error::Shape {
                op: "fuse:target/mask",
                lhs: vec![target_index, mask.len()],
                rhs: vec![t, self.space.dim()],
            });
        }
        let us = tape.concat_cols(&[h_u, h_s])?;
        let g = layers::linear(tape, us, "fusion.a")?;
        let es = tape.concat_cols(&[h_e, h_hat])?;
        let m = layers::linear(tape, es, "fusion.b")?;
        let z = tape.concat_cols(&[g, m])?;
        let z_t = tape.gather_rows(z, &vec![target_index; t])?;
        let rate = self.config.dropout;
        let mut drop = |tape: &mut Tape<'_>, v: Var| match dropout.as_deref_mut() {
            Some(rng) => tape.dropout(v, rate, rng),
            None => v,
        };
        let joined = tape.concat_cols(&[z, z_t])?;
        let mut x = drop(tape, joined);
        for i in 0..self.config.fusion_hidden.len() {
            let pre = layers::linear(tape, x, &format!("head.hidden{i}"))?;
            let act = tape.relu(pre);
            x = drop(tape, act);
        }
        let logits = layers::linear(tape, x, "head.out")?;
        let p = tape.sigmoid(logits);
        let row = Tensor::row_vector(mask.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect())?;
        let mask_row = tape.constant(row);
        tape.mul(p, mask_row)
    }

    /// Full forward pass on `tape`; parameters are read through the tape, so
    /// a tape over a perturbed store evaluates the perturbed model.
    pub fn forward_on(&self, tape: &mut Tape<'_>, instance: &EfrInstance) -> Result<Var> {
        self.forward_with(tape, instance, None)
    }

    /// [`forward_on`](Self::forward_on) with training-time dropout drawn from `dropout`.
    pub fn forward_with(
        &self,
        tape: &mut Tape<'_>,
        instance: &EfrInstance,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let t = instance.len();
        if t == 0 {
            return Err(Error::Invalid(format!("instance {} is empty", instance.instance_id)));
        }
        let mask = self.mask(instance)?;
        let h_u = self.encode_gus(tape, instance)?;
        let h_e = if self.config.enabled(Module::Ges) {
            self.encode_ges(tape, instance)?
        } else {
            Self::zeros(tape, t, self.config.gru_hidden)
        };
        let h_hat = if self.config.enabled(Module::Sses) {
            self.encode_sses(tape, instance)?
        } else {
            Self::zeros(tape, t, self.config.gru_hidden)
        };
        let h_s = if self.config.enabled(Module::Gss) {
            self.encode_gss(tape, instance)?
        } else {
            Self::zeros(tape, t, self.config.d_model)
        };
        self.fuse_and_predict(tape, h_u, h_s, h_e, h_hat, instance.target_index, &mask, dropout)
    }

    pub fn forward(&self, instance: &EfrInstance) -> Result<Prediction> {
        let mut tape = Tape::with_params(&self.params);
        let p = self.forward_on(&mut tape, instance)?;
        let probs = tape.value(p).clone();
        let threshold = self.config.decision_threshold;
        let predicted = (0..probs.rows())
            .map(|i| {
                probs
                    .row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v > threshold)
                    .map(|(k, _)| k)
                    .collect()
            })
            .collect();
        Ok(Prediction {
            instance_id: instance.instance_id.clone(),
            probs,
            predicted,
            mask: self.mask(instance)?,
        })
    }

    /// Forward passes on many instances, in parallel, in input order.
    pub fn predict_all(&self, instances: &[EfrInstance]) -> Result<Vec<Prediction>> {
        use rayon::prelude::*;
        instances.par_iter().map(|i| self.forward(i)).collect()
    }
}
