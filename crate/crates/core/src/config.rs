//! Experiment configuration: a single TOML file drives data generation,
//! every pipeline stage, the ablation matrix and report assembly. All
//! randomness flows from the seeds named here.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::TapDepth;
use crate::train::{ClsDistillMode, RunConfig};

/// Environment variable overriding the output root directory.
pub const OUT_ROOT_ENV: &str = "CROSSDISTILL_OUT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationMatrix {
    /// Target-supervision flag values to sweep.
    pub r: Vec<u8>,
    /// Number of source domains to keep (1 = first source only).
    pub source_counts: Vec<usize>,
    pub tap_depths: Vec<TapDepth>,
    pub cls_modes: Vec<ClsDistillMode>,
    pub ks: Vec<usize>,
}

impl AblationMatrix {
    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
            && self.source_counts.is_empty()
            && self.tap_depths.is_empty()
            && self.cls_modes.is_empty()
            && self.ks.is_empty()
    }

    /// Enumerate every cell of the matrix as config edits. Empty axes
    /// contribute the base value.
    pub fn cells(&self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let rs: Vec<u8> = if self.r.is_empty() { vec![base.r_flag] } else { self.r.clone() };
        let counts: Vec<usize> = if self.source_counts.is_empty() {
            vec![base.sources.len()]
        } else {
            self.source_counts.clone()
        };
        let depths: Vec<TapDepth> = if self.tap_depths.is_empty() {
            vec![base.tap_depth]
        } else {
            self.tap_depths.clone()
        };
        let modes: Vec<ClsDistillMode> = if self.cls_modes.is_empty() {
            vec![base.cls_distill.mode]
        } else {
            self.cls_modes.clone()
        };
        let ks: Vec<usize> = if self.ks.is_empty() {
            vec![base.cls_distill.k]
        } else {
            self.ks.clone()
        };
        let mut out = Vec::new();
        for &r in &rs {
            for &n_src in &counts {
                for &depth in &depths {
                    for &mode in &modes {
                        for &k in &ks {
                            let mut cfg = base.clone();
                            cfg.r_flag = r;
                            cfg.sources.truncate(n_src.max(1).min(base.sources.len()));
                            cfg.tap_depth = depth;
                            cfg.cls_distill.mode = mode;
                            cfg.cls_distill.k = k;
                            let name = format!(
                                "r{r}-src{}-{}-{}-k{k}",
                                cfg.sources.len(),
                                tap_depth_name(depth),
                                mode_name(mode),
                            );
                            out.push((name, cfg));
                        }
                    }
                }
            }
        }
        out
    }
}

fn tap_depth_name(d: TapDepth) -> &'static str {
    match d {
        TapDepth::Encoder => "encoder",
        TapDepth::Bottleneck => "bottleneck",
        TapDepth::Both => "both",
    }
}

fn mode_name(m: ClsDistillMode) -> &'static str {
    match m {
        ClsDistillMode::EarlyK => "early",
        ClsDistillMode::LateK => "late",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Experiment name; prefixes run directories.
    pub name: String,
    /// Output root; overridden by `--out` and the `CROSSDISTILL_OUT` env var.
    pub out_dir: PathBuf,
    /// Seeds to run; each produces an independent pipeline.
    pub seeds: Vec<u64>,
    pub run: RunConfig,
    #[serde(default)]
    pub ablation: AblationMatrix,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::validation("name", "must be nonempty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::validation("seeds", "must be nonempty"));
        }
        self.run.validate()?;
        for k in &self.ablation.ks {
            if *k == 0 || *k > self.run.fusion.fa_blocks {
                return Err(Error::validation("ablation.ks", "need 1 <= k <= fa_blocks"));
            }
        }
        for n in &self.ablation.source_counts {
            if *n == 0 || *n > self.run.sources.len() {
                return Err(Error::validation(
                    "ablation.source_counts",
                    "must be within 1..=sources",
                ));
            }
        }
        for r in &self.ablation.r {
            if *r > 1 {
                return Err(Error::validation("ablation.r", "entries must be 0 or 1"));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("encode: {e}")))
    }

    /// Output root after applying the CLI override and the environment
    /// variable (highest precedence: `--out`, then env, then the file).
    pub fn resolve_out_root(&self, cli_out: Option<&Path>) -> PathBuf {
        if let Some(p) = cli_out {
            return p.to_path_buf();
        }
        if let Ok(v) = std::env::var(OUT_ROOT_ENV) {
            if !v.is_empty() {
                return PathBuf::from(v);
            }
        }
        self.out_dir.clone()
    }
}
