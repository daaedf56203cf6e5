//! Loading of checkpoints, corpora and render settings, and the latent to
//! texture decode path shared by the CLI and the server.

use std::path::Path;

use haptex_core::align::LatentIndex;
use haptex_core::corpus::{ArGrid, Corpus, MaterialRecord, NormStats, TapBank};
use haptex_core::render::{estimate_friction, FrictionAnchorSet, RenderConfig, RenderError, RenderModel};
use haptex_core::vae::{self, CheckpointMeta, Vae};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

pub const EXTRA_ANCHORS: &str = "anchors";
pub const EXTRA_INDEX: &str = "index";
/// Latent coordinates beyond this magnitude are rejected before decoding.
pub const LATENT_LIMIT: f64 = 1e4;

/// Everything needed to render one texture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub ar_grid: ArGrid,
    pub tap_bank: TapBank,
    pub mu: f64,
}

impl Texture {
    pub fn from_material(m: &MaterialRecord) -> Self {
        Self { ar_grid: m.ar_grid.clone(), tap_bank: m.tap_bank.clone(), mu: m.friction_coefficient }
    }

    pub fn render_model(&self) -> Result<RenderModel<f64>, ServiceError> {
        Ok(RenderModel::new(&self.ar_grid, self.tap_bank.clone(), self.mu)?)
    }
}

/// A trained model with its normalization stats, friction anchors and
/// per-material latent index.
pub struct Bundle {
    pub model: Vae<f32>,
    pub meta: CheckpointMeta,
    pub stats: NormStats,
    pub anchors: FrictionAnchorSet<f32>,
    pub index: LatentIndex,
}

impl Bundle {
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let (model, meta) = vae::load_checkpoint::<f32>(path)?;
        let stats = meta
            .norm_stats
            .clone()
            .ok_or_else(|| ServiceError::Model("checkpoint has no normalization stats".into()))?;
        let extra = |key: &str| meta.extra.get(key).cloned();
        let anchors = match extra(EXTRA_ANCHORS) {
            Some(v) => serde_json::from_value(v).map_err(|e| ServiceError::Model(format!("bad anchor set: {e}")))?,
            None => FrictionAnchorSet { anchors: Vec::new() },
        };
        let index = match extra(EXTRA_INDEX) {
            Some(v) => serde_json::from_value(v).map_err(|e| ServiceError::Model(format!("bad latent index: {e}")))?,
            None => LatentIndex { ids: Vec::new(), means: Vec::new() },
        };
        Ok(Self { model, meta, stats, anchors, index })
    }

    pub fn latent_dim(&self) -> usize {
        self.model.dims.latent
    }

    /// Validate a client latent and convert it to model precision.
    pub fn check_latent(&self, z: &[f64]) -> Result<Vec<f32>, ServiceError> {
        let d = self.latent_dim();
        if z.len() != d {
            return Err(ServiceError::Usage(format!("latent must have {d} values, got {}", z.len())));
        }
        if let Some(v) = z.iter().find(|v| !v.is_finite() || v.abs() > LATENT_LIMIT) {
            return Err(ServiceError::Usage(format!("latent value {v} is not finite or exceeds {LATENT_LIMIT}")));
        }
        Ok(z.iter().map(|&v| v as f32).collect())
    }

    pub fn decode(&mut self, z: &[f32], cfg: &RenderConfig<f64>) -> Result<Texture, ServiceError> {
        let x = Array2::from_shape_vec((1, z.len()), z.to_vec()).map_err(|e| ServiceError::Usage(e.to_string()))?;
        let d = self.model.decode(&x)?;
        Ok(Texture { ar_grid: d.ar_grid(0)?, tap_bank: d.tap_bank(0, &self.stats)?, mu: self.friction(z, cfg)? })
    }

    /// Anchor-weighted friction. The zero latent has no direction, so it gets
    /// the mean anchor friction.
    pub fn friction(&self, z: &[f32], cfg: &RenderConfig<f64>) -> Result<f64, ServiceError> {
        match estimate_friction(z, &self.anchors, cfg.friction_k, cfg.friction_tau as f32) {
            Ok(mu) => Ok(mu as f64),
            Err(RenderError::ZeroVector(_)) if !self.anchors.anchors.is_empty() => {
                let n = self.anchors.anchors.len() as f64;
                Ok(self.anchors.anchors.iter().map(|a| a.1 as f64).sum::<f64>() / n)
            }
            Err(e) => Err(e.into()),
        }
    }
}

/// Look up a material by id. `M1` also matches `M001`.
pub fn find_material<'a>(corpus: &'a Corpus, id: &str) -> Option<&'a MaterialRecord> {
    corpus.get(id).or_else(|| {
        let n: usize = id.strip_prefix('M')?.parse().ok()?;
        corpus.get(&format!("M{n:03}"))
    })
}

/// Defaults with any fields from the JSON file at `path` overriding them.
pub fn load_render_config(path: Option<&Path>) -> Result<RenderConfig<f64>, ServiceError> {
    let cfg = match path {
        None => RenderConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ServiceError::Io(format!("{}: {e}", p.display())))?;
            render_config_from_json(&serde_json::from_str(&text)?)?
        }
    };
    Ok(cfg)
}

pub fn render_config_from_json(overrides: &serde_json::Value) -> Result<RenderConfig<f64>, ServiceError> {
    let mut base = serde_json::to_value(RenderConfig::<f64>::default())?;
    let serde_json::Value::Object(o) = overrides else {
        return Err(ServiceError::Usage("render config must be a JSON object".into()));
    };
    for (k, v) in o {
        match base.get_mut(k) {
            Some(slot) => *slot = v.clone(),
            None => return Err(ServiceError::Usage(format!("unknown render config field {k:?}"))),
        }
    }
    let cfg: RenderConfig<f64> = serde_json::from_value(base)?;
    cfg.validate()?;
    Ok(cfg)
}

/// A latent file holds either a bare array or an object with a `z` array.
pub fn parse_latent(text: &str) -> Result<Vec<f64>, ServiceError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum LatentFile {
        Bare(Vec<f64>),
        Wrapped { z: Vec<f64> },
    }
    Ok(match serde_json::from_str(text)? {
        LatentFile::Bare(z) | LatentFile::Wrapped { z } => z,
    })
}
