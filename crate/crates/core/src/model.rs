//! The full video encoder: pyramid, aggregation, residual stack, pooling.

use std::io::Read;
use std::path::Path;

use crate::aggregate::{aggregate_on_tape, Layout};
use crate::autograd::{Tape, Var};
use crate::config::Config;
use crate::data::{stream, INIT_STREAM};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamStore};
use crate::pyramid::{PyramidInit, PyramidParams};
use crate::retrieval::{pool_on_tape, Embedding, Temperature};
use crate::ssm::ResMamba;
use crate::tensor::Tensor;

/// Initial scale and shift of the last pyramid norm. The shift dominates, so
/// tokens start close to a shared constant vector, and cosine similarities to
/// zero-sum texts start near zero.
pub const PYRAMID_OUT_GAMMA: f64 = 0.1;
pub const PYRAMID_OUT_BETA: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: Config,
    pub store: ParamStore,
    pub pyramid: PyramidParams,
    pub stack: ResMamba,
    pub temperature: Temperature,
    pub layout: Layout,
}

impl Model {
    pub fn init(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, INIT_STREAM);
        let mut store = ParamStore::new();
        let scales = cfg.scale_set()?;
        let pyramid = PyramidParams::init(
            &mut store,
            &scales,
            PyramidInit {
                channels: cfg.channels,
                conv_layers: cfg.conv_layers,
                out_gamma: PYRAMID_OUT_GAMMA,
                out_beta: PYRAMID_OUT_BETA,
            },
            &mut rng,
        )?;
        let stack = ResMamba::init(&mut store, cfg.ssm(), cfg.layers, &mut rng)?;
        let temperature = Temperature::init(&mut store, cfg.temperature_init)?;
        let layout = Layout::new(cfg.aggregation, &cfg.scales, cfg.frames);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            pyramid,
            stack,
            temperature,
            layout,
        })
    }

    /// Aggregated token sequence `[L x C]` for one video, before the stack.
    pub fn tokens(&self, tape: &mut Tape, binds: &Bindings, video: Var) -> Result<Var> {
        let maps = self.pyramid.forward(tape, binds, video)?;
        aggregate_on_tape(tape, &maps, &self.layout)
    }

    /// Unit embedding row `[1 x C]` for one video `[T x G x G x C]`.
    pub fn encode(&self, tape: &mut Tape, binds: &Bindings, video: Var) -> Result<Var> {
        let tokens = self.tokens(tape, binds, video)?;
        let out = self.stack.forward(tape, binds, tokens)?;
        pool_on_tape(tape, out, &self.layout, self.cfg.pooling)
    }

    /// Stacked embeddings `[B x C]` for a batch of videos.
    pub fn encode_batch(&self, tape: &mut Tape, binds: &Bindings, videos: &[&Tensor]) -> Result<Var> {
        let rows = videos
            .iter()
            .map(|v| {
                let x = tape.constant((*v).clone());
                self.encode(tape, binds, x)
            })
            .collect::<Result<Vec<_>>>()?;
        tape.concat_rows(&rows)
    }

    pub fn embed(&self, video: &Tensor) -> Result<Embedding> {
        let mut tape = Tape::inference();
        let binds = self.store.bind(&mut tape);
        let x = tape.constant(video.clone());
        let e = self.encode(&mut tape, &binds, x)?;
        Embedding::new(tape.value(e).reshape([self.cfg.channels])?)
    }

    /// Write `params.bin`, `config.txt` and `manifest.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("params.bin"))?);
        self.store.write_to(&mut f)?;
        std::io::Write::flush(&mut f)?;
        std::fs::write(dir.join("config.txt"), self.cfg.to_string())?;
        let manifest: Vec<_> = self
            .store
            .iter()
            .map(|(name, t)| serde_json::json!({ "name": name, "shape": t.shape() }))
            .collect();
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Build the structure from `cfg` and fill it from a checkpoint directory.
    pub fn load(cfg: &Config, dir: impl AsRef<Path>) -> Result<Self> {
        let mut model = Self::init(cfg)?;
        let bytes = std::fs::read(dir.as_ref().join("params.bin"))?;
        let mut r = bytes.as_slice();
        model
            .store
            .read_values_from(&mut r)
            .map_err(|e| Error::Config(format!("checkpoint does not match config: {e}")))?;
        if r.read(&mut [0u8])? != 0 {
            return Err(Error::Config("checkpoint holds more parameters than the config".into()));
        }
        Ok(model)
    }
}
