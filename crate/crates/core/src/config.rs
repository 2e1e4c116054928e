//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{MaaeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Paradigm {
    /// One model for every class.
    Unified,
    /// One independently trained model per class.
    Separate,
}

/// Which tensor the reconstruction is compared against during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconTarget {
    /// The noised input `X + ε′`.
    Noised,
    /// The un-noised fused feature `X`.
    Clean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ablation {
    pub use_ang: bool,
    pub use_ffm: bool,
    pub use_mixed_attention: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        use_ang: true,
        use_ffm: true,
        use_mixed_attention: true,
    };

    /// The six module combinations of the ablation study, in table order.
    pub const GRID: [Ablation; 6] = [
        Ablation::flags(false, false, false),
        Ablation::flags(false, false, true),
        Ablation::flags(true, false, false),
        Ablation::flags(true, true, false),
        Ablation::flags(true, false, true),
        Ablation::flags(true, true, true),
    ];

    pub const fn flags(use_ang: bool, use_ffm: bool, use_mixed_attention: bool) -> Self {
        Ablation {
            use_ang,
            use_ffm,
            use_mixed_attention,
        }
    }
}

/// Parameters of the generated desk-scale dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub train_per_class: usize,
    pub test_normal_per_class: usize,
    pub test_anomalous_per_class: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub paradigm: Paradigm,
    pub image_size: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_ang: f64,
    pub lambda_re: f64,
    /// Noise intensity `A`.
    pub intensity: f64,
    pub w_init: f64,
    pub dilation: usize,
    pub num_blocks: usize,
    pub residual_period: usize,
    pub seed_backbone: u64,
    pub seed_ang: u64,
    pub seed_init: u64,
    pub seed_shuffle: u64,
    pub ablation: Ablation,
    pub recon_target: ReconTarget,
    pub data: SyntheticSpec,
    /// Dataset directory (MVTec layout) or manifest file.
    pub data_path: Option<PathBuf>,
    pub run_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

const KEYS: &[&str] = &[
    "paradigm",
    "image_size",
    "lr",
    "batch_size",
    "epochs",
    "ang.lambda_ang",
    "ang.lambda_re",
    "ang.intensity",
    "ang.w_init",
    "ang.seed",
    "model.dilation",
    "model.num_blocks",
    "model.residual_period",
    "seed.backbone",
    "seed.init",
    "seed.shuffle",
    "ablation.use_ang",
    "ablation.use_ffm",
    "ablation.use_mixed_attention",
    "recon.target",
    "data.num_classes",
    "data.train_per_class",
    "data.test_normal_per_class",
    "data.test_anomalous_per_class",
    "data.seed",
    "data.path",
    "run.dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| MaaeError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn positive(key: &str, value: &str) -> Result<usize> {
    let v: usize = parse(key, value)?;
    if v == 0 {
        return Err(MaaeError::BadValue {
            key: key.into(),
            value: value.into(),
            reason: "must be positive".into(),
        });
    }
    Ok(v)
}

fn non_negative(key: &str, value: &str) -> Result<f64> {
    let v: f64 = parse(key, value)?;
    if !(v >= 0.0 && v.is_finite()) {
        return Err(MaaeError::BadValue {
            key: key.into(),
            value: value.into(),
            reason: "must be finite and non-negative".into(),
        });
    }
    Ok(v)
}

impl RunConfig {
    /// Desk-scale defaults: 64×64 images, 4 blocks, batch 8.
    pub fn desk() -> Self {
        RunConfig {
            paradigm: Paradigm::Unified,
            image_size: 64,
            lr: 1e-4,
            batch_size: 8,
            epochs: 20,
            lambda_ang: 0.6,
            lambda_re: 1.0,
            intensity: 0.5,
            w_init: 0.01,
            dilation: 4,
            num_blocks: 4,
            residual_period: 3,
            seed_backbone: 7,
            seed_ang: 11,
            seed_init: 13,
            seed_shuffle: 17,
            ablation: Ablation::FULL,
            recon_target: ReconTarget::Noised,
            data: SyntheticSpec {
                num_classes: 3,
                image_size: 64,
                train_per_class: 20,
                test_normal_per_class: 10,
                test_anomalous_per_class: 10,
                seed: 5,
            },
            data_path: None,
            run_dir: PathBuf::from("maae_run"),
        }
    }

    /// Full-scale configuration: 256 px inputs, 18 blocks, batch 64.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.image_size = 256;
        c.data.image_size = 256;
        c.lr = 1e-4;
        c.batch_size = 64;
        c.num_blocks = 18;
        c.residual_period = 3;
        c
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::desk();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MaaeError::io(path, e))?;
        Self::from_text(&text)
    }

    /// Applies every `key = value` line; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(MaaeError::BadValue {
                    key: line.to_string(),
                    value: String::new(),
                    reason: "expected `key = value`".into(),
                });
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| MaaeError::BadValue {
            key: assignment.to_string(),
            value: String::new(),
            reason: "expected `key=value`".into(),
        })?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "paradigm" => {
                self.paradigm = match value {
                    "unified" => Paradigm::Unified,
                    "separate" => Paradigm::Separate,
                    _ => return Err(bad(key, value, "expected unified|separate")),
                }
            }
            "image_size" => {
                let v = positive(key, value)?;
                if v % 16 != 0 {
                    return Err(bad(key, value, "must be divisible by 16"));
                }
                self.image_size = v;
                self.data.image_size = v;
            }
            "lr" => {
                let v = non_negative(key, value)?;
                if v == 0.0 {
                    return Err(bad(key, value, "must be positive"));
                }
                self.lr = v;
            }
            "batch_size" => self.batch_size = positive(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "ang.lambda_ang" => self.lambda_ang = non_negative(key, value)?,
            "ang.lambda_re" => self.lambda_re = non_negative(key, value)?,
            "ang.intensity" => self.intensity = non_negative(key, value)?,
            "ang.w_init" => self.w_init = parse(key, value)?,
            "ang.seed" => self.seed_ang = parse(key, value)?,
            "model.dilation" => self.dilation = positive(key, value)?,
            "model.num_blocks" => self.num_blocks = parse(key, value)?,
            "model.residual_period" => self.residual_period = positive(key, value)?,
            "seed.backbone" => self.seed_backbone = parse(key, value)?,
            "seed.init" => self.seed_init = parse(key, value)?,
            "seed.shuffle" => self.seed_shuffle = parse(key, value)?,
            "ablation.use_ang" => self.ablation.use_ang = parse(key, value)?,
            "ablation.use_ffm" => self.ablation.use_ffm = parse(key, value)?,
            "ablation.use_mixed_attention" => self.ablation.use_mixed_attention = parse(key, value)?,
            "recon.target" => {
                self.recon_target = match value {
                    "noised" => ReconTarget::Noised,
                    "clean" => ReconTarget::Clean,
                    _ => return Err(bad(key, value, "expected noised|clean")),
                }
            }
            "data.num_classes" => self.data.num_classes = positive(key, value)?,
            "data.train_per_class" => self.data.train_per_class = positive(key, value)?,
            "data.test_normal_per_class" => self.data.test_normal_per_class = parse(key, value)?,
            "data.test_anomalous_per_class" => self.data.test_anomalous_per_class = parse(key, value)?,
            "data.seed" => self.data.seed = parse(key, value)?,
            "data.path" => self.data_path = Some(PathBuf::from(value)),
            "run.dir" => self.run_dir = PathBuf::from(value),
            _ => return Err(MaaeError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn known_keys() -> &'static [&'static str] {
        KEYS
    }

    /// Canonical text form; parsing it yields an equal configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let paradigm = match self.paradigm {
            Paradigm::Unified => "unified",
            Paradigm::Separate => "separate",
        };
        let target = match self.recon_target {
            ReconTarget::Noised => "noised",
            ReconTarget::Clean => "clean",
        };
        let _ = writeln!(s, "paradigm = {paradigm}");
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "lr = {:e}", self.lr);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "ang.lambda_ang = {}", self.lambda_ang);
        let _ = writeln!(s, "ang.lambda_re = {}", self.lambda_re);
        let _ = writeln!(s, "ang.intensity = {}", self.intensity);
        let _ = writeln!(s, "ang.w_init = {}", self.w_init);
        let _ = writeln!(s, "ang.seed = {}", self.seed_ang);
        let _ = writeln!(s, "model.dilation = {}", self.dilation);
        let _ = writeln!(s, "model.num_blocks = {}", self.num_blocks);
        let _ = writeln!(s, "model.residual_period = {}", self.residual_period);
        let _ = writeln!(s, "seed.backbone = {}", self.seed_backbone);
        let _ = writeln!(s, "seed.init = {}", self.seed_init);
        let _ = writeln!(s, "seed.shuffle = {}", self.seed_shuffle);
        let _ = writeln!(s, "ablation.use_ang = {}", self.ablation.use_ang);
        let _ = writeln!(s, "ablation.use_ffm = {}", self.ablation.use_ffm);
        let _ = writeln!(s, "ablation.use_mixed_attention = {}", self.ablation.use_mixed_attention);
        let _ = writeln!(s, "recon.target = {target}");
        let _ = writeln!(s, "data.num_classes = {}", self.data.num_classes);
        let _ = writeln!(s, "data.train_per_class = {}", self.data.train_per_class);
        let _ = writeln!(s, "data.test_normal_per_class = {}", self.data.test_normal_per_class);
        let _ = writeln!(s, "data.test_anomalous_per_class = {}", self.data.test_anomalous_per_class);
        let _ = writeln!(s, "data.seed = {}", self.data.seed);
        if let Some(p) = &self.data_path {
            let _ = writeln!(s, "data.path = {}", p.display());
        }
        let _ = writeln!(s, "run.dir = {}", self.run_dir.display());
        s
    }

    /// Short FNV-1a digest of the canonical text, for reports.
    pub fn digest(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.data_path.clone().unwrap_or_else(|| self.run_dir.join("data"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.run_dir.join("checkpoints")
    }

    /// Noise intensity actually applied: zero when ANG is ablated.
    pub fn effective_intensity(&self) -> f64 {
        if self.ablation.use_ang {
            self.intensity
        } else {
            0.0
        }
    }
}

fn bad(key: &str, value: &str, reason: &str) -> MaaeError {
    MaaeError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    }
}
