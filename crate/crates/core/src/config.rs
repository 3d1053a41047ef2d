//! Run configuration, read from TOML with one level of sections.
//!
//! ```toml
//! [run]
//! epochs = 10
//! batch_size = 32
//!
//! [distill]
//! tau = 0.05
//! queue_capacity = 512
//! ```
//!
//! Every field has a default, so a section or key may be omitted.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{io_err, Error, Result};
use crate::losses::LossWeights;
use crate::manifest::fnv1a;
use crate::optim::OptimizerConfig;
use crate::probe::ProbeConfig;
use crate::queue::SimilarityMode;
use crate::student::StudentConfig;
use crate::teacher::TeacherConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds masks, augmentation and the epoch order.
    pub seed: u64,
    /// Checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 32, seed: 0, checkpoint_every: 0, out_dir: PathBuf::from("runs/default") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub path: PathBuf,
    /// Use only the first `train_limit` training images (0: all).
    pub train_limit: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { path: PathBuf::from("data"), train_limit: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// 0 disables clipping.
    pub max_grad_norm: f64,
    pub trust_ratio: bool,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self { lr: 0.05, warmup_epochs: 5, momentum: 0.9, weight_decay: 1e-4, max_grad_norm: 5.0, trust_ratio: false }
    }
}

impl OptimSection {
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            max_grad_norm: (self.max_grad_norm > 0.0).then_some(self.max_grad_norm),
            trust_ratio: self.trust_ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub tau: f64,
    pub queue_capacity: usize,
    pub mask_ratio: f64,
    pub w_sim: f64,
    pub w_feat: f64,
    pub similarity_mode: SimilarityMode,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            tau: 0.05,
            queue_capacity: 512,
            mask_ratio: 0.6,
            w_sim: 1.0,
            w_feat: 1.0,
            similarity_mode: SimilarityMode::Consistent,
        }
    }
}

impl DistillSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights { sim: self.w_sim, feat: self.w_feat }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherKind {
    Toy,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub kind: TeacherKind,
    /// Token file for the file-backed teacher.
    pub path: PathBuf,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        let t = TeacherConfig::default();
        Self {
            kind: TeacherKind::Toy,
            path: PathBuf::new(),
            patch_size: t.patch_size,
            embed_dim: t.embed_dim,
            depth: t.depth,
            heads: t.heads,
            mlp_ratio: t.mlp_ratio,
            seed: t.seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub optim: OptimSection,
    pub distill: DistillSection,
    pub augment: AugmentConfig,
    pub student: StudentConfig,
    pub teacher: TeacherSection,
    pub probe: ProbeConfig,
}

impl DistillConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("{}: {}", origin, e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Stable hash of the canonical serialization.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_toml().as_bytes())
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        let t = &self.teacher;
        TeacherConfig {
            patch_size: t.patch_size,
            embed_dim: t.embed_dim,
            depth: t.depth,
            heads: t.heads,
            mlp_ratio: t.mlp_ratio,
            image_size: self.student.image_size,
            in_channels: self.student.in_channels,
            seed: t.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (r, o, d) = (&self.run, &self.optim, &self.distill);
        if r.epochs == 0 || r.batch_size == 0 {
            return bad("run.epochs and run.batch_size must be positive".into());
        }
        if o.warmup_epochs >= r.epochs {
            return bad(format!("optim.warmup_epochs {} must be less than run.epochs {}", o.warmup_epochs, r.epochs));
        }
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.momentum) || o.weight_decay < 0.0 || o.max_grad_norm < 0.0 {
            return bad("optim: lr must be positive, momentum in [0, 1), weight_decay and max_grad_norm non-negative".into());
        }
        if !(d.tau > 0.0) {
            return bad(format!("distill.tau {} must be positive", d.tau));
        }
        if d.queue_capacity < r.batch_size {
            return bad(format!(
                "distill.queue_capacity {} must be at least run.batch_size {}",
                d.queue_capacity, r.batch_size
            ));
        }
        if !(0.0..1.0).contains(&d.mask_ratio) {
            return bad(format!("distill.mask_ratio {} outside [0, 1)", d.mask_ratio));
        }
        if d.w_sim < 0.0 || d.w_feat < 0.0 {
            return bad("distill weights must be non-negative".into());
        }
        self.student.validate()?;
        if self.teacher.kind == TeacherKind::Toy {
            self.teacher_config().validate()?;
        }
        if self.teacher.embed_dim != self.student.embed_dim {
            return bad(format!(
                "teacher.embed_dim {} must equal student.embed_dim {}",
                self.teacher.embed_dim, self.student.embed_dim
            ));
        }
        if self.teacher.patch_size != self.student.token_patch {
            return bad(format!(
                "teacher.patch_size {} must equal student.token_patch {}",
                self.teacher.patch_size, self.student.token_patch
            ));
        }
        if self.teacher.kind == TeacherKind::File && self.teacher.path.as_os_str().is_empty() {
            return bad("teacher.path is required when teacher.kind = \"file\"".into());
        }
        Ok(())
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{}.{}", prefix, k) };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// Dotted names of every field whose value differs between `a` and `b`.
pub fn differing_fields(a: &DistillConfig, b: &DistillConfig) -> Vec<String> {
    let table = |c: &DistillConfig| {
        let mut m = BTreeMap::new();
        flatten("", &toml::Value::try_from(c).expect("config serializes"), &mut m);
        m
    };
    let (ta, tb) = (table(a), table(b));
    let mut keys: Vec<&String> = ta.keys().chain(tb.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().filter(|k| ta.get(*k) != tb.get(*k)).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = DistillConfig::default();
        c.validate().unwrap();
        let back = DistillConfig::from_toml(&c.to_toml(), "mem").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_sections() {
        let c = DistillConfig::from_toml("[run]\nepochs = 3\nwarmup = 1\n", "mem");
        let err = c.unwrap_err().to_string();
        assert!(err.contains("warmup") && err.contains("line"), "{}", err);
        let c = DistillConfig::from_toml(
            "[run]\nepochs = 3\n[optim]\nwarmup_epochs = 1\n[distill]\nsimilarity_mode = \"as-written\"\n",
            "mem",
        )
        .unwrap();
        assert_eq!(c.run.epochs, 3);
        assert_eq!(c.distill.similarity_mode, SimilarityMode::AsWritten);
        assert_eq!(c.student, StudentConfig::default());
    }

    #[test]
    fn invariants() {
        let mut c = DistillConfig::default();
        c.optim.warmup_epochs = c.run.epochs;
        assert!(c.validate().is_err());
        let mut c = DistillConfig::default();
        c.distill.queue_capacity = 8;
        assert!(c.validate().is_err());
        let mut c = DistillConfig::default();
        c.teacher.embed_dim = 32;
        assert!(c.validate().unwrap_err().to_string().contains("32"));
    }

    #[test]
    fn diff_names_fields() {
        let a = DistillConfig::default();
        let mut b = a.clone();
        b.student.widths = [8, 16, 32, 64];
        b.distill.tau = 0.1;
        assert_eq!(differing_fields(&a, &b), vec!["distill.tau".to_string(), "student.widths".to_string()]);
        assert_ne!(a.hash(), b.hash());
    }
}
