//! The attribution network: token embedding table, parallel convolution
//! stacks with SeLU and global max pooling, metadata concatenation, and one
//! of two heads — softmax logits over labs, or a metric embedding paired
//! with a learned lab-embedding table.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelWeights};

use rand_distr::{Distribution, Normal, Uniform};

use crate::bpe::UNKNOWN_ID;
use crate::config::{EncoderConfig, HeadKind};
use crate::error::{Error, Result};
use crate::rng::{substream, substream_indexed};
use crate::scalar::Scalar;
use crate::tensor::{DiffTensor, FeatureMask, Tape};

/// A named parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamArray<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> ParamArray<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack<T> {
    pub kernel_size: usize,
    /// [filters, kernel_size, embed_dim]
    pub kernels: ParamArray<T>,
    /// [filters]
    pub bias: ParamArray<T>,
}

/// Trainable state of the network. A value of this type is immutable during
/// inference and owned mutably by the optimizer during training.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionModel<T> {
    pub config: EncoderConfig,
    /// [vocab_size, token_embed_dim]
    pub token_table: ParamArray<T>,
    pub convs: Vec<ConvStack<T>>,
    /// [head_output_dim, feature_dim]
    pub head_w: ParamArray<T>,
    /// [head_output_dim]
    pub head_b: ParamArray<T>,
    /// [num_labs, metric_dim]; triplet head only. Stored unnormalized and
    /// L2-normalized at every use.
    pub lab_table: Option<ParamArray<T>>,
}

impl<T: Scalar> AttributionModel<T> {
    /// Seeded initialization: embedding tables uniform in (-0.05, 0.05),
    /// conv and dense weights zero-mean normal with 1/sqrt(fan_in) scale
    /// (the self-normalizing-activation convention), biases zero.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let uniform = Uniform::new(-0.05f64, 0.05f64)
            .map_err(|e| Error::Config(format!("bad init range: {e}")))?;

        let mut table_rng = substream(seed, "init-token-table");
        let token_table = ParamArray {
            shape: vec![config.vocab_size, config.token_embed_dim],
            data: (0..config.vocab_size * config.token_embed_dim)
                .map(|_| T::from_f64(uniform.sample(&mut table_rng)))
                .collect(),
        };

        let mut convs = Vec::with_capacity(config.kernel_sizes.len());
        for (i, &k) in config.kernel_sizes.iter().enumerate() {
            let fan_in = k * config.token_embed_dim;
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt())
                .map_err(|e| Error::Config(format!("bad init scale: {e}")))?;
            let mut rng = substream_indexed(seed, "init-conv", i as u64);
            let kernels = ParamArray {
                shape: vec![config.filters_per_kernel, k, config.token_embed_dim],
                data: (0..config.filters_per_kernel * fan_in)
                    .map(|_| T::from_f64(normal.sample(&mut rng)))
                    .collect(),
            };
            convs.push(ConvStack {
                kernel_size: k,
                kernels,
                bias: ParamArray::zeros(&[config.filters_per_kernel]),
            });
        }

        let feature_dim = config.feature_dim();
        let out_dim = config.head_output_dim();
        let normal = Normal::new(0.0, (1.0 / feature_dim as f64).sqrt())
            .map_err(|e| Error::Config(format!("bad init scale: {e}")))?;
        let mut head_rng = substream(seed, "init-head");
        let head_w = ParamArray {
            shape: vec![out_dim, feature_dim],
            data: (0..out_dim * feature_dim)
                .map(|_| T::from_f64(normal.sample(&mut head_rng)))
                .collect(),
        };
        let head_b = ParamArray::zeros(&[out_dim]);

        let lab_table = match config.head {
            HeadKind::Triplet => {
                let mut rng = substream(seed, "init-lab-table");
                Some(ParamArray {
                    shape: vec![config.num_labs, config.metric_dim],
                    data: (0..config.num_labs * config.metric_dim)
                        .map(|_| T::from_f64(uniform.sample(&mut rng)))
                        .collect(),
                })
            }
            HeadKind::Softmax => None,
        };

        Ok(Self {
            config,
            token_table,
            convs,
            head_w,
            head_b,
            lab_table,
        })
    }

    /// Parameter arrays in canonical (checkpoint) order.
    pub fn param_entries(&self) -> Vec<(String, &ParamArray<T>)> {
        let mut out: Vec<(String, &ParamArray<T>)> =
            vec![("token_table".to_string(), &self.token_table)];
        for c in &self.convs {
            out.push((format!("conv{}.kernels", c.kernel_size), &c.kernels));
            out.push((format!("conv{}.bias", c.kernel_size), &c.bias));
        }
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        if let Some(labs) = &self.lab_table {
            out.push(("lab_table".to_string(), labs));
        }
        out
    }

    pub fn param_entries_mut(&mut self) -> Vec<(String, &mut ParamArray<T>)> {
        let mut out: Vec<(String, &mut ParamArray<T>)> =
            vec![("token_table".to_string(), &mut self.token_table)];
        for c in &mut self.convs {
            out.push((format!("conv{}.kernels", c.kernel_size), &mut c.kernels));
            out.push((format!("conv{}.bias", c.kernel_size), &mut c.bias));
        }
        out.push(("head.w".to_string(), &mut self.head_w));
        out.push(("head.b".to_string(), &mut self.head_b));
        if let Some(labs) = &mut self.lab_table {
            out.push(("lab_table".to_string(), labs));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.param_entries().iter().map(|(_, p)| p.len()).sum()
    }

    /// Places the model's parameters on a tape. With `trainable` they become
    /// gradient-carrying leaves in canonical order (matching
    /// [`AttributionModel::param_entries`]); otherwise constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Result<BoundModel<'t, T>> {
        let place = |p: &ParamArray<T>| -> Result<DiffTensor> {
            if trainable {
                tape.param(&p.shape, p.data.clone())
            } else {
                tape.leaf(&p.shape, p.data.clone())
            }
        };
        let token_table = place(&self.token_table)?;
        let mut convs = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            convs.push((c.kernel_size, place(&c.kernels)?, place(&c.bias)?));
        }
        let head_w = place(&self.head_w)?;
        let head_b = place(&self.head_b)?;
        let lab_table = match &self.lab_table {
            Some(l) => Some(place(l)?),
            None => None,
        };
        Ok(BoundModel {
            tape,
            config: self.config.clone(),
            token_table,
            convs,
            head_w,
            head_b,
            lab_table,
        })
    }

    /// Row-normalized lab embeddings as plain values (the form used for
    /// ranking and mining).
    pub fn normalized_lab_rows(&self) -> Result<Vec<Vec<T>>> {
        let table = self
            .lab_table
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("softmax model has no lab embeddings".into()))?;
        let e = self.config.metric_dim;
        Ok(table
            .data
            .chunks(e)
            .map(|row| {
                let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if norm.as_f64() <= crate::tensor::L2_NORM_EPSILON {
                    row.to_vec()
                } else {
                    row.iter().map(|&v| v / norm).collect()
                }
            })
            .collect())
    }
}

/// A model's parameters materialized on one tape, plus the forward ops.
pub struct BoundModel<'t, T: Scalar> {
    tape: &'t Tape<T>,
    config: EncoderConfig,
    pub token_table: DiffTensor,
    convs: Vec<(usize, DiffTensor, DiffTensor)>,
    head_w: DiffTensor,
    head_b: DiffTensor,
    pub lab_table: Option<DiffTensor>,
}

impl<'t, T: Scalar> BoundModel<'t, T> {
    /// Gradient-carrying leaves in canonical parameter order.
    pub fn param_tensors(&self) -> Vec<DiffTensor> {
        let mut out = vec![self.token_table.clone()];
        for (_, k, b) in &self.convs {
            out.push(k.clone());
            out.push(b.clone());
        }
        out.push(self.head_w.clone());
        out.push(self.head_b.clone());
        if let Some(l) = &self.lab_table {
            out.push(l.clone());
        }
        out
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Embeds tokens, runs every convolution stack (conv -> SeLU -> global
    /// max pool), concatenates the pooled features with the metadata flags.
    /// Token sequences shorter than the largest kernel are right-padded with
    /// the unknown token. In training mode the caller passes the batch's
    /// shared dropout mask.
    pub fn encode_sequence(
        &self,
        token_ids: &[u32],
        metadata: &[u8],
        mask: Option<&FeatureMask<T>>,
    ) -> Result<DiffTensor> {
        if token_ids.is_empty() {
            return Err(Error::InvalidInput(
                "cannot encode an empty token sequence".into(),
            ));
        }
        if token_ids.len() > self.config.max_tokens {
            return Err(Error::InvalidInput(format!(
                "token sequence length {} exceeds max_tokens {}; truncate upstream",
                token_ids.len(),
                self.config.max_tokens
            )));
        }
        if metadata.len() != self.config.metadata_dim {
            return Err(Error::Shape(format!(
                "metadata must have {} flags, got {}",
                self.config.metadata_dim,
                metadata.len()
            )));
        }
        let mut ids: Vec<usize> = token_ids.iter().map(|&t| t as usize).collect();
        while ids.len() < self.config.max_kernel() {
            ids.push(UNKNOWN_ID as usize);
        }

        let embedded = self.tape.embedding_lookup(&self.token_table, &ids)?;
        let embedded = match mask {
            Some(m) => self.tape.apply_feature_mask(&embedded, m)?,
            None => embedded,
        };

        let mut parts = Vec::with_capacity(self.convs.len() + 1);
        for (_, kernels, bias) in &self.convs {
            let conv = self.tape.conv1d(&embedded, kernels, bias)?;
            let act = self.tape.selu(&conv);
            parts.push(self.tape.global_max_pool(&act)?);
        }
        let meta: Vec<T> = metadata.iter().map(|&f| T::from_f64(f64::from(f))).collect();
        parts.push(self.tape.leaf(&[meta.len()], meta)?);
        self.tape.concat(&parts)
    }

    /// Dense projection to the metric space followed by L2 normalization.
    pub fn sequence_embedding(&self, features: &DiffTensor) -> Result<DiffTensor> {
        if self.config.head != HeadKind::Triplet {
            return Err(Error::InvalidInput(
                "sequence_embedding requires the triplet head".into(),
            ));
        }
        let projected = self.tape.dense(features, &self.head_w, &self.head_b)?;
        self.tape.l2_normalize(&projected)
    }

    /// Raw logits over labs (softmax applied downstream).
    pub fn softmax_logits(&self, features: &DiffTensor) -> Result<DiffTensor> {
        if self.config.head != HeadKind::Softmax {
            return Err(Error::InvalidInput(
                "softmax_logits requires the softmax head".into(),
            ));
        }
        self.tape.dense(features, &self.head_w, &self.head_b)
    }

    /// L2-normalized row of the lab table.
    pub fn lab_embedding(&self, lab_index: usize) -> Result<DiffTensor> {
        let table = self
            .lab_table
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("softmax model has no lab embeddings".into()))?;
        if lab_index >= self.config.num_labs {
            return Err(Error::InvalidInput(format!(
                "lab index {lab_index} out of range for {} labs",
                self.config.num_labs
            )));
        }
        let row = self.tape.embedding_lookup(table, &[lab_index])?;
        let flat = self.tape.flatten(&row);
        self.tape.l2_normalize(&flat)
    }
}

/// Softmax probabilities from raw logits (stable, values only).
pub fn softmax_values<T: Scalar>(logits: &[T]) -> Vec<T> {
    if logits.is_empty() {
        return Vec::new();
    }
    let m = logits.iter().copied().fold(logits[0], T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - m).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|v| v / total).collect()
}

/// Truncates a token sequence to the model's input budget, keeping the
/// prefix.
pub fn truncate_tokens(ids: &mut Vec<u32>, max_tokens: usize) {
    ids.truncate(max_tokens);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::GradCheckParam;

    fn tiny_config(head: HeadKind) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 20,
            token_embed_dim: 8,
            kernel_sizes: vec![1, 2, 3],
            filters_per_kernel: 4,
            metadata_dim: crate::data::METADATA_DIM,
            max_tokens: 50,
            head,
            metric_dim: 16,
            num_labs: 5,
            dropout_rate: 0.2,
        }
    }

    #[test]
    fn feature_vector_has_configured_width() {
        let cfg = tiny_config(HeadKind::Triplet);
        let model: AttributionModel<f64> = AttributionModel::init(cfg.clone(), 1).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape, false).unwrap();
        let features = bound
            .encode_sequence(&[1, 2, 3, 4, 5], &[0u8; 39], None)
            .unwrap();
        assert_eq!(features.len(), cfg.feature_dim());
        // Default production config: 12 * 256 + 39 = 3111.
        let full = EncoderConfig::with_defaults(HeadKind::Triplet, 10);
        assert_eq!(full.feature_dim(), 3111);
    }

    #[test]
    fn zero_parameters_give_metadata_passthrough() {
        let cfg = tiny_config(HeadKind::Triplet);
        let mut model: AttributionModel<f64> = AttributionModel::init(cfg.clone(), 1).unwrap();
        for (_, p) in model.param_entries_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let tape = Tape::new();
        let bound = model.bind(&tape, false).unwrap();
        let mut meta = [0u8; 39];
        meta[3] = 1;
        let features = bound.encode_sequence(&[1, 2, 3], &meta, None).unwrap();
        let v = tape.value(&features);
        assert!(v[..cfg.hidden_dim()].iter().all(|&x| x == 0.0));
        assert_eq!(v[cfg.hidden_dim() + 3], 1.0);
        assert_eq!(v[cfg.hidden_dim()], 0.0);
    }

    #[test]
    fn short_sequences_are_padded_not_rejected() {
        let cfg = tiny_config(HeadKind::Triplet);
        let model: AttributionModel<f64> = AttributionModel::init(cfg.clone(), 1).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape, false).unwrap();
        // One token against a max kernel size of 3.
        let features = bound.encode_sequence(&[7], &[0u8; 39], None).unwrap();
        assert_eq!(features.len(), cfg.feature_dim());
        assert!(bound.encode_sequence(&[], &[0u8; 39], None).is_err());
    }

    #[test]
    fn sequence_embedding_is_unit_norm_and_deterministic() {
        let cfg = tiny_config(HeadKind::Triplet);
        let model: AttributionModel<f64> = AttributionModel::init(cfg, 1).unwrap();
        let embed = || {
            let tape = Tape::new();
            let bound = model.bind(&tape, false).unwrap();
            let f = bound.encode_sequence(&[1, 2, 3, 4], &[0u8; 39], None).unwrap();
            let e = bound.sequence_embedding(&f).unwrap();
            tape.value(&e)
        };
        let a = embed();
        let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-6);
        let b = embed();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn lab_embedding_rows_are_independent_and_unit_norm() {
        let cfg = tiny_config(HeadKind::Triplet);
        let mut model: AttributionModel<f64> = AttributionModel::init(cfg.clone(), 1).unwrap();
        let embed_row = |model: &AttributionModel<f64>, i: usize| {
            let tape = Tape::new();
            let bound = model.bind(&tape, false).unwrap();
            let e = bound.lab_embedding(i).unwrap();
            tape.value(&e)
        };
        let before_row0 = embed_row(&model, 0);
        let norm: f64 = before_row0.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-6);
        // The auxiliary class occupies the last row like any lab.
        let aux = embed_row(&model, cfg.num_labs - 1);
        assert_eq!(aux.len(), cfg.metric_dim);
        // Perturbing row 1 leaves row 0 untouched.
        model.lab_table.as_mut().unwrap().data[cfg.metric_dim] += 1.0;
        let after_row0 = embed_row(&model, 0);
        assert_eq!(before_row0, after_row0);
        // Out of range is fatal.
        let tape = Tape::new();
        let bound = model.bind(&tape, false).unwrap();
        assert!(bound.lab_embedding(cfg.num_labs).is_err());
    }

    #[test]
    fn softmax_head_invariants() {
        let cfg = tiny_config(HeadKind::Softmax);
        let model: AttributionModel<f64> = AttributionModel::init(cfg.clone(), 3).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape, false).unwrap();
        let f = bound.encode_sequence(&[1, 2, 3, 4], &[0u8; 39], None).unwrap();
        let logits = bound.softmax_logits(&f).unwrap();
        assert_eq!(logits.len(), cfg.num_labs);
        let p = softmax_values(&tape.value(&logits));
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() <= 1e-9);

        // Shift invariance of the argmax.
        let v = tape.value(&logits);
        let shifted: Vec<f64> = v.iter().map(|x| x + 5.0).collect();
        let argmax = |xs: &[f64]| {
            xs.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(argmax(&v), argmax(&shifted));

        // Zero parameters -> uniform probabilities.
        let mut zero_model = model.clone();
        for (_, p) in zero_model.param_entries_mut() {
            p.data.iter_mut().for_each(|x| *x = 0.0);
        }
        let tape2 = Tape::new();
        let bound2 = zero_model.bind(&tape2, false).unwrap();
        let f2 = bound2.encode_sequence(&[1, 2], &[0u8; 39], None).unwrap();
        let l2 = bound2.softmax_logits(&f2).unwrap();
        let p2 = softmax_values(&tape2.value(&l2));
        for pi in p2 {
            assert!((pi - 1.0 / cfg.num_labs as f64).abs() <= 1e-12);
        }

        // Head misuse is fatal in both directions.
        assert!(bound.sequence_embedding(&f).is_err());
        let triplet: AttributionModel<f64> =
            AttributionModel::init(tiny_config(HeadKind::Triplet), 3).unwrap();
        let tape3 = Tape::new();
        let bound3 = triplet.bind(&tape3, false).unwrap();
        let f3 = bound3.encode_sequence(&[1, 2], &[0u8; 39], None).unwrap();
        assert!(bound3.softmax_logits(&f3).is_err());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for head in [HeadKind::Triplet, HeadKind::Softmax] {
            let cfg = tiny_config(head);
            let model: AttributionModel<f64> = AttributionModel::init(cfg.clone(), 1).unwrap();
            assert_eq!(model.parameter_count(), cfg.parameter_count());
        }
    }

    /// Full reduced-config model against central finite differences: the
    /// whole forward path (embedding, dropout mask, convs, SeLU, pooling,
    /// concat, head, normalization) within 1e-4 relative error at 64-bit.
    #[test]
    fn full_model_gradient_check_reduced_config() {
        let cfg = tiny_config(HeadKind::Triplet);
        let model: AttributionModel<f64> = AttributionModel::init(cfg.clone(), 7).unwrap();
        let entries = model.param_entries();
        let params: Vec<GradCheckParam> = entries
            .iter()
            .map(|(name, p)| GradCheckParam::new(name, &p.shape, p.data.clone()))
            .collect();
        let token_ids: Vec<u32> = vec![1, 5, 2, 9, 3, 1];
        let check_ids = token_ids.clone();
        let mut meta = [0u8; 39];
        meta[0] = 1;
        meta[20] = 1;
        let mask = {
            let mut rng = substream(3, "model-gradcheck-mask");
            FeatureMask::<f64>::sample(cfg.token_embed_dim, cfg.dropout_rate, &mut rng).unwrap()
        };
        let cfg2 = cfg.clone();
        let report = crate::tensor::grad_check(
            move |tape, ps| {
                // Rebuild a bound model from the gradcheck parameter tensors.
                let mut iter = ps.iter().cloned();
                let token_table = iter.next().unwrap();
                let mut convs = Vec::new();
                for &k in &cfg2.kernel_sizes {
                    let kernels = iter.next().unwrap();
                    let bias = iter.next().unwrap();
                    convs.push((k, kernels, bias));
                }
                let head_w = iter.next().unwrap();
                let head_b = iter.next().unwrap();
                let lab_table = iter.next();
                let bound = BoundModel {
                    tape,
                    config: cfg2.clone(),
                    token_table,
                    convs,
                    head_w,
                    head_b,
                    lab_table,
                };
                let features = bound.encode_sequence(&token_ids, &meta, Some(&mask))?;
                let emb = bound.sequence_embedding(&features)?;
                let lab = bound.lab_embedding(2)?;
                // A similarity-style scalar so every parameter participates.
                tape.dot(&emb, &lab)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.all_passed(), "{report}");
        // Gradient reaches the token table on a similarity loss.
        let tape = Tape::new();
        let bound = model.bind(&tape, true).unwrap();
        let features = bound.encode_sequence(&check_ids, &meta, None).unwrap();
        let emb = bound.sequence_embedding(&features).unwrap();
        let lab = bound.lab_embedding(2).unwrap();
        let sim = tape.dot(&emb, &lab).unwrap();
        tape.backward(&sim).unwrap();
        let table_grad = tape.grad(&bound.token_table).unwrap();
        assert!(table_grad.iter().any(|&g| g != 0.0));
    }
}
