//! The full network: query encoder, mask encoder and decoder sharing one
//! parameter store, plus checkpoint persistence.

use crate::checkpoint;
use crate::decoder::{Decoder, DecoderConfig, FOREGROUND};
use crate::encoders::{EncoderConfig, FrameFeatures, FrameVars, MaskEncoder, QueryEncoder};
use crate::error::{Error, Result};
use crate::params::{Forward, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// A narrower network (roughly a ninth of the default's cost) for
    /// CPU-only training runs.
    pub fn compact(input_resolution: (usize, usize)) -> Self {
        Self {
            encoder: EncoderConfig {
                input_resolution,
                downscale: 8,
                backbone_channels: vec![16, 32, 32],
                mask_channels: vec![8, 16, 16],
                blocks_per_stage: 1,
                key_dim: 16,
                query_dim: 16,
                value_dim: 16,
            },
            decoder: DecoderConfig {
                stage_channels: vec![32, 16, 8],
                skip_connections: false,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate(self.encoder.downscale)
    }

    fn to_records(&self) -> Vec<(String, Tensor)> {
        let e = &self.encoder;
        let v = |xs: &[usize]| {
            Tensor::from_parts(vec![xs.len()], xs.iter().map(|&x| x as f64).collect())
        };
        vec![
            (
                "config/input_resolution".into(),
                v(&[e.input_resolution.0, e.input_resolution.1]),
            ),
            ("config/downscale".into(), v(&[e.downscale])),
            ("config/backbone_channels".into(), v(&e.backbone_channels)),
            ("config/mask_channels".into(), v(&e.mask_channels)),
            ("config/blocks_per_stage".into(), v(&[e.blocks_per_stage])),
            ("config/key_dim".into(), v(&[e.key_dim])),
            ("config/query_dim".into(), v(&[e.query_dim])),
            ("config/value_dim".into(), v(&[e.value_dim])),
            ("config/decoder_channels".into(), v(&self.decoder.stage_channels)),
        ]
    }

    fn from_records(records: &[(String, Tensor)]) -> Result<Self> {
        let get = |key: &str| -> Result<Vec<usize>> {
            records
                .iter()
                .find(|(n, _)| n == &format!("config/{key}"))
                .map(|(_, t)| t.data().iter().map(|&x| x as usize).collect())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks config/{key}")))
        };
        let one = |key: &str| -> Result<usize> {
            get(key)?
                .first()
                .copied()
                .ok_or_else(|| Error::Format(format!("empty config/{key}")))
        };
        let res = get("input_resolution")?;
        if res.len() != 2 {
            return Err(Error::Format("config/input_resolution must hold 2 values".into()));
        }
        let cfg = Self {
            encoder: EncoderConfig {
                input_resolution: (res[0], res[1]),
                downscale: one("downscale")?,
                backbone_channels: get("backbone_channels")?,
                mask_channels: get("mask_channels")?,
                blocks_per_stage: one("blocks_per_stage")?,
                key_dim: one("key_dim")?,
                query_dim: one("query_dim")?,
                value_dim: one("value_dim")?,
            },
            decoder: DecoderConfig {
                stage_channels: get("decoder_channels")?,
                skip_connections: false,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Records in a checkpoint that are not model weights.
fn is_meta(name: &str) -> bool {
    name.starts_with("config/") || name.starts_with("adam/") || name.starts_with("train/")
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    query_encoder: QueryEncoder,
    mask_encoder: MaskEncoder,
    decoder: Decoder,
}

/// Outputs of one segmentation step on the tape.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub features: FrameVars,
    /// `[1,2,H,W]`
    pub probs: Var,
    /// `[1,1,H,W]` foreground probability.
    pub foreground: Var,
}

impl Model {
    /// Freshly initialised model; the parameter count depends only on `config`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let query_encoder = QueryEncoder::new(&mut params, &config.encoder, &mut rng)?;
        let mask_encoder = MaskEncoder::new(&mut params, &config.encoder, &mut rng)?;
        let e = &config.encoder;
        let decoder = Decoder::new(
            &mut params,
            &config.decoder,
            e.value_dim + e.query_dim,
            e.downscale,
            &mut rng,
        )?;
        Ok(Self {
            config,
            params,
            query_encoder,
            mask_encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.config.encoder.input_resolution
    }

    pub fn encode_query_on(&self, cx: &mut Forward, frame: Var) -> Result<FrameVars> {
        self.query_encoder.forward(cx, frame)
    }

    pub fn encode_mask_on(&self, cx: &mut Forward, mask: Var, backbone: Var) -> Result<Var> {
        self.mask_encoder.forward(cx, mask, backbone)
    }

    pub fn decode_on(&self, cx: &mut Forward, readout: Var, query: Var) -> Result<Var> {
        self.decoder.forward(cx, readout, query)
    }

    /// Segments a frame against a tape memory: encode, read out, decode.
    pub fn segment_on(
        &self,
        cx: &mut Forward,
        memory: &crate::memory::TapeMemory,
        frame: Var,
    ) -> Result<StepVars> {
        let features = self.encode_query_on(cx, frame)?;
        let (h, w) = self.config.encoder.feature_size();
        let kd = self.config.encoder.key_dim;
        let vd = self.config.encoder.value_dim;
        let key = cx.tape.reshape(features.key, vec![kd, h * w])?;
        let affinity = memory.affinity(cx.tape, key)?;
        let readout = memory.readout(cx.tape, affinity)?;
        let readout = cx.tape.reshape(readout, vec![1, vd, h, w])?;
        let probs = self.decode_on(cx, readout, features.query)?;
        let foreground = cx.tape.narrow(probs, 1, FOREGROUND, 1)?;
        Ok(StepVars {
            features,
            probs,
            foreground,
        })
    }

    /// Query/key features of a `[1,3,H,W]` frame.
    pub fn encode_query(&self, frame: &Tensor) -> Result<FrameFeatures> {
        let mut tape = Tape::new();
        let mut cx = Forward::new(&mut tape, &self.params, false);
        let x = cx.tape.constant(frame.clone());
        let f = self.encode_query_on(&mut cx, x)?;
        Ok(FrameFeatures {
            backbone: tape.value(f.backbone).clone(),
            query: tape.value(f.query).clone(),
            key: tape.value(f.key).clone(),
        })
    }

    /// Value features of a `[1,1,H,W]` mask given the frame's backbone features.
    pub fn encode_mask(&self, mask: &Tensor, backbone: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut cx = Forward::new(&mut tape, &self.params, false);
        let m = cx.tape.constant(mask.clone());
        let b = cx.tape.constant(backbone.clone());
        let v = self.encode_mask_on(&mut cx, m, b)?;
        Ok(tape.value(v).clone())
    }

    /// `[1,2,H,W]` class probabilities from readout and query maps.
    pub fn decode(&self, readout: &Tensor, query: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut cx = Forward::new(&mut tape, &self.params, false);
        let r = cx.tape.constant(readout.clone());
        let q = cx.tape.constant(query.clone());
        let p = self.decode_on(&mut cx, r, q)?;
        Ok(tape.value(p).clone())
    }

    /// Config and weight records in checkpoint order.
    pub fn records(&self) -> Vec<(String, Tensor)> {
        let mut out = self.config.to_records();
        out.extend(self.params.iter().map(|(n, t)| (n.to_string(), t.detach())));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with(path, &[])
    }

    /// Saves the model followed by `extra` records (optimizer state etc).
    pub fn save_with(&self, path: &Path, extra: &[(String, Tensor)]) -> Result<()> {
        let records = self.records();
        checkpoint::save(
            path,
            records
                .iter()
                .chain(extra)
                .map(|(n, t)| (n.as_str(), t)),
        )
    }

    pub fn from_records(records: &[(String, Tensor)]) -> Result<Self> {
        let config = ModelConfig::from_records(records)?;
        let mut model = Self::new(config, 0)?;
        let weights: Vec<(String, Tensor)> = records
            .iter()
            .filter(|(n, _)| !is_meta(n))
            .cloned()
            .collect();
        model.params.load_values(&weights)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(&checkpoint::load(path)?)
    }
}
