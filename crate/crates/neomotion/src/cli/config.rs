//! Flat key=value configuration: `section.key=value` lines, `#` comments.
//! Every key is optional and falls back to the desk-scale default; unknown
//! keys are rejected so typos fail loudly instead of silently reverting to
//! defaults.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use indexmap::{IndexMap, IndexSet};

use crate::cyclegan::{CycleLossConfig, DiscriminatorSpec, GeneratorSpec, TrainConfig};
use crate::motionsim::MotionConfig;
use crate::phantom::{PhantomConfig, SplitCounts};
use crate::segnet::{Augmentation, SegTrainConfig, UNetSpec};
use crate::util::{content_hash, derive_seed};
use crate::volumeio::PatchSpec;

use super::CliError;

/// Parsed but untyped key=value pairs in file order.
pub struct RawConfig {
    map: IndexMap<String, String>,
    accessed: RefCell<IndexSet<String>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut map = IndexMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "line {}: expected key=value, got {line:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            let key_ok = !key.is_empty()
                && key
                    .chars()
                    .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || "._-".contains(c));
            if !key_ok {
                return Err(CliError::Config(format!("line {}: bad key {key:?}", lineno + 1)));
            }
            if map.insert(key.to_string(), value.to_string()).is_some() {
                return Err(CliError::Config(format!(
                    "line {}: duplicate key {key}",
                    lineno + 1
                )));
            }
        }
        Ok(Self { map, accessed: RefCell::new(IndexSet::new()) })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.accessed.borrow_mut().insert(key.to_string());
        self.map.get(key).map(|s| s.as_str())
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| {
                CliError::Config(format!("key {key}: cannot parse {s:?}"))
            }),
        }
    }

    /// Fails if any key in the file was never consumed by the typed build.
    fn check_unknown(&self) -> Result<(), CliError> {
        let accessed = self.accessed.borrow();
        let unknown: Vec<&str> = self
            .map
            .keys()
            .filter(|k| !accessed.contains(k.as_str()))
            .map(|k| k.as_str())
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }
}

/// Fully resolved settings for one experiment tree.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    /// Global seed; all stage seeds derive from it.
    pub seed: u64,
    /// Root of the artifact tree.
    pub out: PathBuf,
    pub phantom: PhantomConfig,
    pub splits: SplitCounts,
    pub motion: MotionConfig,
    pub cyclegan: TrainConfig,
    pub cycle_loss: CycleLossConfig,
    pub segnet: SegTrainConfig,
}

impl ExperimentConfig {
    /// Builds from parsed keys plus command-line overrides. `out` must come
    /// from either the file (`out=`) or the flag.
    pub fn from_raw(
        raw: &RawConfig,
        out_flag: Option<PathBuf>,
        seed_flag: Option<u64>,
    ) -> Result<Self, CliError> {
        let seed = match seed_flag {
            Some(s) => {
                raw.raw("seed");
                s
            }
            None => raw.get("seed", 17u64)?,
        };
        let out = match out_flag {
            Some(p) => {
                raw.raw("out");
                p
            }
            None => match raw.raw("out") {
                Some(p) => PathBuf::from(p),
                None => {
                    return Err(CliError::Config(
                        "output directory missing: set out= in the config or pass --out".into(),
                    ))
                }
            },
        };

        let phantom = PhantomConfig {
            dims: (
                raw.get("phantom.nx", 64usize)?,
                raw.get("phantom.ny", 64usize)?,
                raw.get("phantom.nz", 8usize)?,
            ),
            spacing: (
                raw.get("phantom.spacing_x", 0.34f32)?,
                raw.get("phantom.spacing_y", 0.34f32)?,
                raw.get("phantom.spacing_z", 2.0f32)?,
            ),
            seed: derive_seed(seed, "cohort", 0),
            noise_sigma: raw.get("phantom.noise_sigma", 0.02f32)?,
            bias_amplitude: raw.get("phantom.bias_amplitude", 0.1f32)?,
            deformation_scale: raw.get("phantom.deformation_scale", 3.0f32)?,
            ..PhantomConfig::default()
        };
        let splits = SplitCounts {
            train_clean: raw.get("cohort.train_clean", 12usize)?,
            train_motion: raw.get("cohort.train_motion", 12usize)?,
            test: raw.get("cohort.test", 10usize)?,
        };
        let motion = MotionConfig {
            seed: 0, // per-volume seeds derive at the corruption site
            n_events: (
                raw.get("motion.n_events_min", 1usize)?,
                raw.get("motion.n_events_max", 3usize)?,
            ),
            max_translation: raw.get("motion.max_translation", 4.0f64)?,
            max_rotation: raw.get("motion.max_rotation", 0.05f64)?,
        };
        let cyclegan = TrainConfig {
            batch_size: raw.get("cyclegan.batch_size", 1usize)?,
            learning_rate: raw.get("cyclegan.learning_rate", 2e-4f32)?,
            iterations: raw.get("cyclegan.iterations", 2000usize)?,
            seed: derive_seed(seed, "cyclegan", 0),
            replay_buffer: raw.get("cyclegan.replay_buffer", 50usize)?,
            generator: GeneratorSpec {
                base_width: raw.get("cyclegan.generator_width", 16usize)?,
                n_residual_blocks: raw.get("cyclegan.residual_blocks", 3usize)?,
            },
            discriminator: DiscriminatorSpec {
                base_width: raw.get("cyclegan.discriminator_width", 16usize)?,
            },
        };
        let cycle_loss = CycleLossConfig { lambda: raw.get("cyclegan.lambda", 10.0f32)? };
        let augmentation = match raw.raw("segnet.augmentation").unwrap_or("none") {
            "none" => Augmentation::None,
            "motion" => Augmentation::Motion,
            other => {
                return Err(CliError::Config(format!(
                    "segnet.augmentation must be none or motion, got {other:?}"
                )))
            }
        };
        let patch_height = raw.get("segnet.patch_height", phantom.dims.1)?;
        let patch_width = raw.get("segnet.patch_width", phantom.dims.0)?;
        let segnet = SegTrainConfig {
            batch_size: raw.get("segnet.batch_size", 4usize)?,
            learning_rate: raw.get("segnet.learning_rate", 1e-2f32)?,
            epochs: raw.get("segnet.epochs", 60usize)?,
            patch: PatchSpec {
                height: patch_height,
                width: patch_width,
                depth: 3,
                stride: patch_height.max(patch_width),
            },
            augmentation,
            seed: derive_seed(seed, "segnet", 0),
            network: UNetSpec { base_width: raw.get("segnet.base_width", 8usize)? },
        };
        raw.check_unknown()?;

        let cfg = Self { seed, out, phantom, splits, motion, cyclegan, cycle_loss, segnet };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: String| CliError::Config(e);
        self.phantom.validate().map_err(|e| bad(e.to_string()))?;
        self.motion.validate().map_err(|e| bad(e.to_string()))?;
        self.cyclegan.validate().map_err(|e| bad(e.to_string()))?;
        self.cycle_loss.validate().map_err(|e| bad(e.to_string()))?;
        self.segnet.validate().map_err(|e| bad(e.to_string()))?;
        if self.splits.train_clean == 0 || self.splits.train_motion == 0 || self.splits.test == 0 {
            return Err(bad("cohort.train_clean/train_motion/test must all be positive".into()));
        }
        let (nx, ny, _) = self.phantom.dims;
        if nx % 16 != 0 || ny % 16 != 0 {
            return Err(bad(format!("phantom in-plane dims {nx}x{ny} must be divisible by 16")));
        }
        if self.segnet.patch.height > ny || self.segnet.patch.width > nx {
            return Err(bad("segnet patch exceeds phantom in-plane dims".into()));
        }
        Ok(())
    }

    /// Deterministic serialization of every effective setting; its hash
    /// stamps all emitted files.
    pub fn canonical_string(&self) -> String {
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        kv.insert("seed", self.seed.to_string());
        kv.insert("phantom.nx", self.phantom.dims.0.to_string());
        kv.insert("phantom.ny", self.phantom.dims.1.to_string());
        kv.insert("phantom.nz", self.phantom.dims.2.to_string());
        kv.insert("phantom.spacing_x", format!("{}", self.phantom.spacing.0));
        kv.insert("phantom.spacing_y", format!("{}", self.phantom.spacing.1));
        kv.insert("phantom.spacing_z", format!("{}", self.phantom.spacing.2));
        kv.insert("phantom.noise_sigma", format!("{}", self.phantom.noise_sigma));
        kv.insert("phantom.bias_amplitude", format!("{}", self.phantom.bias_amplitude));
        kv.insert(
            "phantom.deformation_scale",
            format!("{}", self.phantom.deformation_scale),
        );
        kv.insert("cohort.train_clean", self.splits.train_clean.to_string());
        kv.insert("cohort.train_motion", self.splits.train_motion.to_string());
        kv.insert("cohort.test", self.splits.test.to_string());
        kv.insert("motion.n_events_min", self.motion.n_events.0.to_string());
        kv.insert("motion.n_events_max", self.motion.n_events.1.to_string());
        kv.insert("motion.max_translation", format!("{}", self.motion.max_translation));
        kv.insert("motion.max_rotation", format!("{}", self.motion.max_rotation));
        kv.insert("cyclegan.batch_size", self.cyclegan.batch_size.to_string());
        kv.insert("cyclegan.learning_rate", format!("{}", self.cyclegan.learning_rate));
        kv.insert("cyclegan.iterations", self.cyclegan.iterations.to_string());
        kv.insert("cyclegan.replay_buffer", self.cyclegan.replay_buffer.to_string());
        kv.insert(
            "cyclegan.generator_width",
            self.cyclegan.generator.base_width.to_string(),
        );
        kv.insert(
            "cyclegan.residual_blocks",
            self.cyclegan.generator.n_residual_blocks.to_string(),
        );
        kv.insert(
            "cyclegan.discriminator_width",
            self.cyclegan.discriminator.base_width.to_string(),
        );
        kv.insert("cyclegan.lambda", format!("{}", self.cycle_loss.lambda));
        kv.insert("segnet.batch_size", self.segnet.batch_size.to_string());
        kv.insert("segnet.learning_rate", format!("{}", self.segnet.learning_rate));
        kv.insert("segnet.epochs", self.segnet.epochs.to_string());
        kv.insert("segnet.patch_height", self.segnet.patch.height.to_string());
        kv.insert("segnet.patch_width", self.segnet.patch.width.to_string());
        kv.insert("segnet.base_width", self.segnet.network.base_width.to_string());
        kv.insert(
            "segnet.augmentation",
            match self.segnet.augmentation {
                Augmentation::None => "none".to_string(),
                Augmentation::Motion => "motion".to_string(),
            },
        );
        let mut s = String::new();
        for (k, v) in kv {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Short hash of [`Self::canonical_string`] for provenance headers.
    pub fn hash(&self) -> String {
        content_hash(self.canonical_string().as_bytes())
    }

    /// The `# config=... seed=...` stamp every emitted text file starts with.
    pub fn provenance(&self) -> Vec<String> {
        vec![format!("config={} seed={}", self.hash(), self.seed)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(text: &str) -> Result<ExperimentConfig, CliError> {
        let raw = RawConfig::parse(text)?;
        ExperimentConfig::from_raw(&raw, Some(PathBuf::from("/tmp/x")), None)
    }

    #[test]
    fn defaults_fill_every_field() {
        let cfg = build("").unwrap();
        assert_eq!(cfg.seed, 17);
        assert_eq!(cfg.phantom.dims, (64, 64, 8));
        assert_eq!(cfg.splits.test, 10);
        assert_eq!(cfg.cyclegan.iterations, 2000);
        assert_eq!(cfg.cycle_loss.lambda, 10.0);
        assert_eq!(cfg.segnet.augmentation, Augmentation::None);
        assert_eq!(cfg.segnet.patch.depth, 3);
    }

    #[test]
    fn section_prefixed_keys_override_defaults() {
        let cfg = build(
            "seed=5\n# comment\ncyclegan.lambda=7.5\nsegnet.augmentation=motion\nphantom.nz=4\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.cycle_loss.lambda, 7.5);
        assert_eq!(cfg.segnet.augmentation, Augmentation::Motion);
        assert_eq!(cfg.phantom.dims.2, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = build("cyclegan.lamda=10\n").unwrap_err();
        assert!(matches!(err, CliError::Config(ref m) if m.contains("cyclegan.lamda")));
    }

    #[test]
    fn malformed_lines_and_values_are_rejected() {
        assert!(matches!(RawConfig::parse("just-a-token\n"), Err(CliError::Config(_))));
        assert!(matches!(RawConfig::parse("seed=1\nseed=2\n"), Err(CliError::Config(_))));
        assert!(matches!(build("seed=abc\n"), Err(CliError::Config(_))));
        assert!(matches!(build("segnet.augmentation=heavy\n"), Err(CliError::Config(_))));
        assert!(matches!(build("phantom.nx=60\n"), Err(CliError::Config(_))));
    }

    #[test]
    fn flag_overrides_win_over_file_values() {
        let raw = RawConfig::parse("seed=5\nout=/tmp/file-out\n").unwrap();
        let cfg =
            ExperimentConfig::from_raw(&raw, Some(PathBuf::from("/tmp/flag-out")), Some(99))
                .unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.out, PathBuf::from("/tmp/flag-out"));
        // File value used when no flag.
        let raw = RawConfig::parse("out=/tmp/file-out\n").unwrap();
        let cfg = ExperimentConfig::from_raw(&raw, None, None).unwrap();
        assert_eq!(cfg.out, PathBuf::from("/tmp/file-out"));
        // Missing everywhere is a config error.
        let raw = RawConfig::parse("").unwrap();
        assert!(matches!(
            ExperimentConfig::from_raw(&raw, None, None),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn hash_tracks_effective_settings_not_formatting() {
        let a = build("cyclegan.lambda=10\n").unwrap();
        let b = build("# different text\n\ncyclegan.lambda = 10\n").unwrap();
        let c = build("cyclegan.lambda=9\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert!(a.provenance()[0].starts_with("config="));
    }

    #[test]
    fn stage_seeds_differ_between_stages() {
        let cfg = build("").unwrap();
        assert_ne!(cfg.cyclegan.seed, cfg.segnet.seed);
        assert_ne!(cfg.cyclegan.seed, cfg.phantom.seed);
    }
}
