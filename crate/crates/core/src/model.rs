//! The full network: toy modality encoders, the text encoder with the fusion
//! block inserted, the explanation decoder, the explanation encoder and the
//! classifier head.

use ndarray::Array2;

use crate::atf::{atf_forward, Atf};
use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::data::{MultimodalSample, TextInput};
use crate::error::{Error, Result};
use crate::explain::Decoder;
use crate::latent::ExplanationEncoder;
use crate::nn::{LayerNorm, Linear, TransformerLayer};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::derived_rng;

const INIT_STREAM: u64 = 1;

/// Parameter handles. The layout is a pure function of the config, so a
/// checkpoint only needs the config and the parameter values.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub text_embed: ParamId,
    pub text_pos: ParamId,
    /// Maps pre-extracted text features of width `d_in_t` to `d`.
    pub text_adapter: Option<Linear>,
    pub visual_proj: Linear,
    pub acoustic_proj: Linear,
    pub encoder: Vec<TransformerLayer>,
    pub encoder_ln: LayerNorm,
    pub atf: Atf,
    pub decoder: Decoder,
    pub expl_encoder: ExplanationEncoder,
    /// `(d_F + d) -> 2`
    pub classifier: Linear,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub arch: Architecture,
}

/// Toy-encoded inputs, all of width `d`.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub text: Var,
    pub visual: Var,
    pub acoustic: Var,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let config = config.validated()?;
        let c = &config;
        let mut rng = derived_rng(c.seed, INIT_STREAM);
        let mut store = ParamStore::new();
        let base = ParamGroup::Base;
        let text_embed = store.add_uniform("text.embed", base, (c.vocab_size, c.d), c.d, &mut rng);
        let text_pos = store.add_uniform("text.pos", base, (c.max_text_len, c.d), c.d, &mut rng);
        let text_adapter = (c.d_in_t > 0).then(|| Linear::new(&mut store, &mut rng, "text.adapter", base, c.d_in_t, c.d, true));
        let visual_proj = Linear::new(&mut store, &mut rng, "visual.proj", base, c.d_in_v, c.d, true);
        let acoustic_proj = Linear::new(&mut store, &mut rng, "acoustic.proj", base, c.d_in_a, c.d, true);
        let encoder = (0..c.encoder_layers)
            .map(|l| TransformerLayer::new(&mut store, &mut rng, &format!("encoder.layer{l}"), base, c.d, c.n_heads, c.ffn_dim, false))
            .collect();
        let encoder_ln = LayerNorm::new(&mut store, "encoder.ln_final", base, c.d);
        let atf = Atf::new(&mut store, &mut rng, "atf", c.d, c.d_c, c.n_heads);
        let decoder = Decoder::new(
            &mut store,
            &mut rng,
            "decoder",
            c.vocab_size,
            c.d,
            c.n_heads,
            c.ffn_dim,
            c.decoder_layers,
            c.max_expl_len,
        );
        let expl_encoder = ExplanationEncoder::new(
            &mut store,
            &mut rng,
            "bitrans",
            c.vocab_size,
            c.d,
            c.d_f,
            c.n_heads,
            c.ffn_dim,
            c.bitrans_layers,
            c.max_expl_len + 1,
        );
        let classifier = Linear::new(&mut store, &mut rng, "classifier", ParamGroup::New, c.d_f + c.d, 2, true);
        let arch = Architecture {
            text_embed,
            text_pos,
            text_adapter,
            visual_proj,
            acoustic_proj,
            encoder,
            encoder_ln,
            atf,
            decoder,
            expl_encoder,
            classifier,
        };
        Ok(Self { config, params: store, arch })
    }

    /// Raw per-modality features projected to width `d`, without positions.
    pub fn toy_encode(&self, t: &mut Tape, sample: &MultimodalSample) -> Result<Encoded> {
        sample.validate(&self.config)?;
        let a = &self.arch;
        let embed = t.param(a.text_embed);
        let text = match &sample.text {
            TextInput::Tokens(toks) => t.gather_rows(embed, toks),
            TextInput::Features(f) if f.ncols() == self.config.vocab_size => {
                let x = t.constant(f.clone());
                t.matmul(x, embed)
            }
            TextInput::Features(f) => match &a.text_adapter {
                Some(adapter) if f.ncols() == self.config.d_in_t => {
                    let x = t.constant(f.clone());
                    adapter.forward(t, x)
                }
                _ => {
                    return Err(Error::shape(
                        "toy_encode",
                        format!("text feature width {} matches neither vocab_size nor d_in_t", f.ncols()),
                    ))
                }
            },
        };
        let v = t.constant(sample.visual.clone());
        let visual = a.visual_proj.forward(t, v);
        let ac = t.constant(sample.acoustic.clone());
        let acoustic = a.acoustic_proj.forward(t, ac);
        Ok(Encoded { text, visual, acoustic })
    }

    /// Encoder stack with the fusion block after `atf_insertion_layer`
    /// layers; returns `M` (`n x d`).
    pub fn fuse(&self, t: &mut Tape, enc: Encoded) -> Result<Var> {
        let a = &self.arch;
        let n = t.shape(enc.text).0;
        let pos = t.param(a.text_pos);
        let pos = t.slice_rows(pos, 0, n);
        let mut x = t.add(enc.text, pos);
        let split = self.config.atf_insertion_layer;
        for layer in &a.encoder[..split] {
            x = layer.forward(t, x, None, None);
        }
        x = atf_forward(t, &a.atf, x, enc.visual, enc.acoustic)?.fused();
        for layer in &a.encoder[split..] {
            x = layer.forward(t, x, None, None);
        }
        let m = a.encoder_ln.forward(t, x);
        if t.value(m).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("fused representation".into()));
        }
        Ok(m)
    }

    pub fn fused_on_tape(&self, t: &mut Tape, sample: &MultimodalSample) -> Result<Var> {
        let enc = self.toy_encode(t, sample)?;
        self.fuse(t, enc)
    }

    /// Value of `M` for `sample`.
    pub fn fused(&self, sample: &MultimodalSample) -> Result<Array2<f64>> {
        let mut t = Tape::new(&self.params);
        let m = self.fused_on_tape(&mut t, sample)?;
        Ok(t.value(m).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SyntheticCorpusSpec};

    fn small() -> ModelConfig {
        ModelConfig { d: 16, d_c: 16, d_f: 4, ffn_dim: 16, decoder_layers: 1, bitrans_layers: 1, ..Default::default() }
    }

    #[test]
    fn encoded_shapes() {
        let model = Model::new(small()).unwrap();
        let (data, _) = generate_synthetic_dataset(&SyntheticCorpusSpec { num_samples: 2, ..Default::default() }, &model.config).unwrap();
        let mut t = Tape::new(&model.params);
        let enc = model.toy_encode(&mut t, &data[0]).unwrap();
        let n = data[0].text.len();
        assert_eq!(t.shape(enc.text), (n, 16));
        assert_eq!(t.shape(enc.visual), (model.config.max_frames, 16));
        assert_eq!(t.shape(enc.acoustic), (1, 16));
        let m = model.fuse(&mut t, enc).unwrap();
        assert_eq!(t.shape(m), (n, 16));
    }

    #[test]
    fn zero_inputs_and_projections_give_zero_features() {
        let mut model = Model::new(small()).unwrap();
        let (mut data, _) = generate_synthetic_dataset(&SyntheticCorpusSpec { num_samples: 1, ..Default::default() }, &model.config).unwrap();
        let ids: Vec<ParamId> = model.params.ids_with_prefix("visual.").chain(model.params.ids_with_prefix("acoustic.")).collect();
        for id in ids {
            model.params.value_mut(id).fill(0.0);
        }
        model.params.value_mut(model.arch.text_embed).fill(0.0);
        data[0].visual.fill(0.0);
        data[0].acoustic.fill(0.0);
        let mut t = Tape::new(&model.params);
        let enc = model.toy_encode(&mut t, &data[0]).unwrap();
        for v in [enc.text, enc.visual, enc.acoustic] {
            assert!(t.value(v).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn only_used_embedding_rows_get_gradient() {
        let model = Model::new(small()).unwrap();
        let (data, _) = generate_synthetic_dataset(&SyntheticCorpusSpec { num_samples: 1, ..Default::default() }, &model.config).unwrap();
        let TextInput::Tokens(toks) = &data[0].text else { panic!() };
        let mut t = Tape::new(&model.params);
        let m = model.fused_on_tape(&mut t, &data[0]).unwrap();
        let sq = t.mul(m, m);
        let loss = t.sum(sq);
        let grads = t.backward(loss);
        let g = grads.get(model.arch.text_embed).unwrap();
        for (row, r) in g.rows().into_iter().enumerate() {
            let used = toks.contains(&row);
            let nonzero = r.iter().any(|&v| v != 0.0);
            assert_eq!(used, nonzero, "row {row}");
        }
    }

    #[test]
    fn one_hot_features_match_tokens() {
        let model = Model::new(small()).unwrap();
        let (data, _) = generate_synthetic_dataset(&SyntheticCorpusSpec { num_samples: 1, ..Default::default() }, &model.config).unwrap();
        let TextInput::Tokens(toks) = &data[0].text else { panic!() };
        let onehot = Array2::from_shape_fn((toks.len(), model.config.vocab_size), |(r, c)| f64::from(u8::from(toks[r] == c)));
        let mut alt = data[0].clone();
        alt.text = TextInput::Features(onehot);
        assert_eq!(model.fused(&data[0]).unwrap(), model.fused(&alt).unwrap());
    }

    #[test]
    fn same_seed_same_init() {
        let a = Model::new(small()).unwrap();
        let b = Model::new(small()).unwrap();
        assert_eq!(a.params, b.params);
        let c = Model::new(ModelConfig { seed: 5, ..small() }).unwrap();
        assert_ne!(a.params, c.params);
    }
}
