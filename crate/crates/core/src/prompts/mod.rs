//! Semantic-concatenation prompt bank and prompt prototypes.
//!
//! Normal prompts are `[P_1..P_EN][object]`. Manual anomaly prompts append
//! a frozen text suffix, learnable anomaly prompts append `[A_1..A_EA]`.
//! Every prompt built from the same prefix or suffix reads the same
//! parameter block, so an update to one block moves all of them.

pub mod lexicon;

use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use lexicon::{SuffixLexicon, DEFAULT_GENERIC_SUFFIXES};

use crate::backbone::{TextEncoder, Tokenizer};
use crate::error::{Error, Result};
use crate::linalg::{mean, norm, normalize, normalize_backward};
use crate::scalar::Scalar;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptKind {
    /// NP
    Normal,
    /// MAP
    Manual,
    /// LAP
    Learnable,
}

/// How anomaly prompts relate to the normal prefixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankLayout {
    /// Anomaly prompts extend the normal prefixes with suffixes.
    SemanticConcatenation,
    /// Two-class baseline: anomaly prompts own separate learnable contexts
    /// `[C_1..C_EN][object]` and share nothing with the normal prompts.
    ClassContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankShape {
    /// Number of normal prefixes.
    pub n: usize,
    /// Number of learnable anomaly suffixes.
    pub l: usize,
    /// Tokens per normal prefix.
    pub e_n: usize,
    /// Tokens per learnable anomaly suffix.
    pub e_a: usize,
}

impl Default for BankShape {
    fn default() -> Self {
        Self {
            n: 1,
            l: 4,
            e_n: 4,
            e_a: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptId {
    pub kind: PromptKind,
    /// Index of the normal prefix (or, for class-context anomaly prompts,
    /// of the anomaly context).
    pub prefix: usize,
    /// Manual or learnable suffix index.
    pub suffix: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct ManualSuffix<T> {
    pub text: String,
    pub ids: Vec<u32>,
    pub embeddings: Array2<T>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct PromptBank<T> {
    pub object_name: String,
    pub layout: BankLayout,
    pub shape: BankShape,
    pub init_seed: u64,
    sot: Array1<T>,
    eot: Array1<T>,
    object_ids: Vec<u32>,
    object_tokens: Array2<T>,
    manual: Vec<ManualSuffix<T>>,
    /// Learnable blocks: `n` prefixes, then `l` suffixes (or anomaly contexts).
    params: Vec<Array2<T>>,
}

/// Where a learnable block sits inside an assembled sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot {
    pub param: usize,
    pub row: usize,
}

#[derive(Debug, Clone)]
pub struct AssembledPrompt<T> {
    pub id: PromptId,
    pub sequence: Array2<T>,
    pub slots: Vec<ParamSlot>,
}

/// Builds the prompt bank for one object.
pub fn build_bank<T: Scalar, E: TextEncoder<T>>(
    object_name: &str,
    lexicon: &SuffixLexicon,
    shape: BankShape,
    init_seed: u64,
    tokenizer: &dyn Tokenizer,
    encoder: &E,
) -> Result<PromptBank<T>> {
    let suffixes = lexicon.suffixes_for(object_name);
    PromptBank::new(
        object_name,
        &suffixes,
        BankLayout::SemanticConcatenation,
        shape,
        init_seed,
        tokenizer,
        encoder,
    )
}

impl<T: Scalar> PromptBank<T> {
    pub fn new<E: TextEncoder<T>>(
        object_name: &str,
        manual_suffixes: &[String],
        layout: BankLayout,
        shape: BankShape,
        init_seed: u64,
        tokenizer: &dyn Tokenizer,
        encoder: &E,
    ) -> Result<Self> {
        if shape.n == 0 || shape.e_n == 0 {
            return Err(Error::input("need at least one normal prefix of length ≥ 1"));
        }
        if layout == BankLayout::SemanticConcatenation && shape.l > 0 && shape.e_a == 0 {
            return Err(Error::input("learnable suffix length must be ≥ 1"));
        }
        let object_ids = tokenizer.encode(object_name);
        if object_ids.is_empty() {
            return Err(Error::input(format!(
                "object name '{object_name}' produces no tokens"
            )));
        }
        let manual = match layout {
            BankLayout::SemanticConcatenation => manual_suffixes
                .iter()
                .map(|text| {
                    let ids = tokenizer.encode(text);
                    if ids.is_empty() {
                        return Err(Error::input(format!("suffix '{text}' produces no tokens")));
                    }
                    Ok(ManualSuffix {
                        text: text.clone(),
                        embeddings: encoder.embed_ids(&ids),
                        ids,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            BankLayout::ClassContext => Vec::new(),
        };
        if shape.l == 0 && manual.is_empty() {
            return Err(Error::input(format!(
                "object '{object_name}' has no anomaly prompts (no manual suffixes and L = 0)"
            )));
        }

        let width = encoder.width();
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let dist = Normal::new(0.0, INIT_STD).expect("positive std");
        let mut block = |rows: usize| {
            Array2::from_shape_simple_fn((rows, width), || T::lit(dist.sample(&mut rng)))
        };
        let mut params: Vec<Array2<T>> = (0..shape.n).map(|_| block(shape.e_n)).collect();
        let anomaly_len = match layout {
            BankLayout::SemanticConcatenation => shape.e_a,
            BankLayout::ClassContext => shape.e_n,
        };
        params.extend((0..shape.l).map(|_| block(anomaly_len)));

        let sentinels = encoder.embed_ids(&[tokenizer.start_of_text(), tokenizer.end_of_text()]);
        let bank = Self {
            object_name: object_name.to_string(),
            layout,
            shape,
            init_seed,
            sot: sentinels.row(0).to_owned(),
            eot: sentinels.row(1).to_owned(),
            object_tokens: encoder.embed_ids(&object_ids),
            object_ids,
            manual,
            params,
        };
        let ctx = encoder.context_length();
        for id in bank.prompt_ids() {
            let len = bank.sequence_len(id);
            if len > ctx {
                return Err(Error::input(format!(
                    "prompt '{}' has {len} tokens, over the context length {ctx}",
                    bank.describe(id)
                )));
            }
        }
        Ok(bank)
    }

    /// Number of manual suffixes (M).
    pub fn m(&self) -> usize {
        self.manual.len()
    }

    pub fn manual_suffixes(&self) -> &[ManualSuffix<T>] {
        &self.manual
    }

    pub fn params(&self) -> &[Array2<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<T>] {
        &mut self.params
    }

    pub fn num_param_blocks(&self) -> usize {
        self.params.len()
    }

    fn suffix_param(&self, l: usize) -> usize {
        self.shape.n + l
    }

    /// All prompts in canonical order: NPs, then MAPs, then LAPs, each
    /// grouped by prefix.
    pub fn prompt_ids(&self) -> Vec<PromptId> {
        let n = self.shape.n;
        let mut ids: Vec<PromptId> = (0..n)
            .map(|p| PromptId {
                kind: PromptKind::Normal,
                prefix: p,
                suffix: None,
            })
            .collect();
        match self.layout {
            BankLayout::SemanticConcatenation => {
                for p in 0..n {
                    ids.extend((0..self.m()).map(|m| PromptId {
                        kind: PromptKind::Manual,
                        prefix: p,
                        suffix: Some(m),
                    }));
                }
                for p in 0..n {
                    ids.extend((0..self.shape.l).map(|l| PromptId {
                        kind: PromptKind::Learnable,
                        prefix: p,
                        suffix: Some(l),
                    }));
                }
            }
            BankLayout::ClassContext => ids.extend((0..self.shape.l).map(|c| PromptId {
                kind: PromptKind::Learnable,
                prefix: c,
                suffix: None,
            })),
        }
        ids
    }

    fn sequence_len(&self, id: PromptId) -> usize {
        let body = self.shape.e_n + self.object_tokens.nrows();
        let suffix = match (id.kind, id.suffix) {
            (PromptKind::Manual, Some(m)) => self.manual[m].ids.len(),
            (PromptKind::Learnable, Some(_)) => self.shape.e_a,
            _ => 0,
        };
        body + suffix + 2
    }

    /// Human-readable rendering, e.g. `[P0×4] bottle with crack`.
    pub fn describe(&self, id: PromptId) -> String {
        let prefix = match (self.layout, id.kind) {
            (BankLayout::ClassContext, PromptKind::Learnable) => {
                format!("[C{}×{}]", id.prefix, self.shape.e_n)
            }
            _ => format!("[P{}×{}]", id.prefix, self.shape.e_n),
        };
        let suffix = match (id.kind, id.suffix) {
            (PromptKind::Manual, Some(m)) => format!(" {}", self.manual[m].text),
            (PromptKind::Learnable, Some(l)) => format!(" [A{l}×{}]", self.shape.e_a),
            _ => String::new(),
        };
        format!("{prefix} {}{suffix}", self.object_name)
    }

    /// `[SOT][prefix][object][suffix][EOT]` for every prompt, reading the
    /// current learnable blocks.
    pub fn assemble_embeddings(&self) -> Vec<AssembledPrompt<T>> {
        self.prompt_ids()
            .into_iter()
            .map(|id| self.assemble(id))
            .collect()
    }

    pub fn assemble(&self, id: PromptId) -> AssembledPrompt<T> {
        let len = self.sequence_len(id);
        let mut seq = Array2::<T>::zeros((len, self.sot.len()));
        let mut slots = Vec::with_capacity(2);
        seq.row_mut(0).assign(&self.sot);
        let mut row = 1;
        let prefix_param = match (self.layout, id.kind) {
            (BankLayout::ClassContext, PromptKind::Learnable) => self.suffix_param(id.prefix),
            _ => id.prefix,
        };
        let put = |seq: &mut Array2<T>, row: &mut usize, block: &Array2<T>| {
            seq.slice_mut(s![*row..*row + block.nrows(), ..]).assign(block);
            *row += block.nrows();
        };
        slots.push(ParamSlot {
            param: prefix_param,
            row,
        });
        put(&mut seq, &mut row, &self.params[prefix_param]);
        put(&mut seq, &mut row, &self.object_tokens);
        match (id.kind, id.suffix) {
            (PromptKind::Manual, Some(m)) => put(&mut seq, &mut row, &self.manual[m].embeddings),
            (PromptKind::Learnable, Some(l)) => {
                let p = self.suffix_param(l);
                slots.push(ParamSlot { param: p, row });
                put(&mut seq, &mut row, &self.params[p]);
            }
            _ => {}
        }
        seq.row_mut(row).assign(&self.eot);
        AssembledPrompt {
            id,
            sequence: seq,
            slots,
        }
    }

    /// Encodes every prompt with the frozen text encoder.
    pub fn encode_all<E: TextEncoder<T>>(&self, encoder: &E) -> Result<Vec<(PromptId, Array1<T>)>> {
        self.assemble_embeddings()
            .into_iter()
            .map(|p| {
                encoder
                    .encode(p.sequence.view())
                    .map(|f| (p.id, f))
                    .map_err(|e| e.context(format!("prompt '{}'", self.describe(p.id))))
            })
            .collect()
    }
}

/// Normal and anomaly prototypes: raw means and their unit-norm copies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct Prototypes<T> {
    pub w_n: Array1<T>,
    pub w_a: Array1<T>,
    pub w_m: Option<Array1<T>>,
    pub w_l: Option<Array1<T>>,
    pub raw_n: Array1<T>,
    pub raw_a: Array1<T>,
    pub raw_m: Option<Array1<T>>,
    pub raw_l: Option<Array1<T>>,
    /// All MAP and LAP features, in input order.
    pub anomaly: Vec<Array1<T>>,
}

/// Gradients of a loss w.r.t. the normalized prototypes and the anomaly list.
#[derive(Debug, Clone)]
pub struct PrototypeGrads<T> {
    pub w_n: Array1<T>,
    pub w_a: Array1<T>,
    pub w_m: Array1<T>,
    pub w_l: Array1<T>,
    pub anomaly: Vec<Array1<T>>,
}

impl<T: Scalar> PrototypeGrads<T> {
    pub fn zeros(dim: usize, anomalies: usize) -> Self {
        Self {
            w_n: Array1::zeros(dim),
            w_a: Array1::zeros(dim),
            w_m: Array1::zeros(dim),
            w_l: Array1::zeros(dim),
            anomaly: vec![Array1::zeros(dim); anomalies],
        }
    }
}

pub fn compute_prototypes<T: Scalar>(features: &[(PromptKind, Array1<T>)]) -> Result<Prototypes<T>> {
    let pick = |kind: PromptKind| -> Vec<Array1<T>> {
        features
            .iter()
            .filter(|(k, _)| *k == kind)
            .map(|(_, f)| f.clone())
            .collect()
    };
    let normal = pick(PromptKind::Normal);
    let manual = pick(PromptKind::Manual);
    let learnable = pick(PromptKind::Learnable);
    if normal.is_empty() {
        return Err(Error::input("no normal prompt features"));
    }
    if manual.is_empty() && learnable.is_empty() {
        return Err(Error::input("no anomaly prompt features (zero MAPs and zero LAPs)"));
    }
    let anomaly: Vec<Array1<T>> = features
        .iter()
        .filter(|(k, _)| *k != PromptKind::Normal)
        .map(|(_, f)| f.clone())
        .collect();
    let raw_n = mean(&normal);
    let raw_a = mean(&anomaly);
    let raw_m = (!manual.is_empty()).then(|| mean(&manual));
    let raw_l = (!learnable.is_empty()).then(|| mean(&learnable));
    Ok(Prototypes {
        w_n: normalize(raw_n.view()),
        w_a: normalize(raw_a.view()),
        w_m: raw_m.as_ref().map(|v| normalize(v.view())),
        w_l: raw_l.as_ref().map(|v| normalize(v.view())),
        raw_n,
        raw_a,
        raw_m,
        raw_l,
        anomaly,
    })
}

impl<T: Scalar> Prototypes<T> {
    /// Pulls prototype gradients back to the per-prompt features that
    /// produced them (same order and kinds as passed to
    /// [`compute_prototypes`]).
    pub fn backward(&self, kinds: &[PromptKind], grads: &PrototypeGrads<T>) -> Vec<Array1<T>> {
        let count = |k: PromptKind| kinds.iter().filter(|&&x| x == k).count();
        let n_norm = count(PromptKind::Normal);
        let n_man = count(PromptKind::Manual);
        let n_learn = count(PromptKind::Learnable);
        let through = |unit: &Array1<T>, raw: &Array1<T>, g: &Array1<T>, count: usize| {
            let d = normalize_backward(unit.view(), norm(raw.view()), g.view());
            let c = T::from_len(count.max(1));
            d.mapv(|v| v / c)
        };
        let d_n = through(&self.w_n, &self.raw_n, &grads.w_n, n_norm);
        let d_a = through(&self.w_a, &self.raw_a, &grads.w_a, n_man + n_learn);
        let d_m = match (&self.w_m, &self.raw_m) {
            (Some(u), Some(r)) => through(u, r, &grads.w_m, n_man),
            _ => Array1::zeros(self.w_n.len()),
        };
        let d_l = match (&self.w_l, &self.raw_l) {
            (Some(u), Some(r)) => through(u, r, &grads.w_l, n_learn),
            _ => Array1::zeros(self.w_n.len()),
        };
        let mut anomaly_idx = 0;
        kinds
            .iter()
            .map(|k| match k {
                PromptKind::Normal => d_n.clone(),
                PromptKind::Manual | PromptKind::Learnable => {
                    let mut g = &d_a + &grads.anomaly[anomaly_idx];
                    anomaly_idx += 1;
                    if *k == PromptKind::Manual {
                        g += &d_m;
                    } else {
                        g += &d_l;
                    }
                    g
                }
            })
            .collect()
    }
}
