//! Stage implementations over the shared artifact tree. Every stage reads
//! its inputs from the tree and writes its outputs back, so stages can run
//! one at a time or all at once via `experiment`; re-running a stage from
//! unchanged upstream artifacts reproduces its outputs byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::fs::File;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::cyclegan::{self, CycleGanError};
use crate::metrics::{self, MetricError};
use crate::motionsim::{corrupt_volume, MotionConfig, MotionError};
use crate::nnkernel::{KernelError, ModelParams};
use crate::phantom::{self, CohortEntry, PhantomError, Split};
use crate::segnet::{self, Augmentation, SegError, SegHistory, SegTrainConfig};
use crate::util::derive_seed;
use crate::volumeio::{self, LabelMap, Volume, VolumeError};

use super::{CliError, ExperimentConfig};

/// Path layout of one experiment's artifact tree.
pub struct Tree {
    root: PathBuf,
}

impl Tree {
    pub fn new(root: &Path) -> Self {
        Tree { root: root.to_path_buf() }
    }

    pub fn cohort(&self) -> PathBuf {
        self.root.join("cohort")
    }

    pub fn manifest(&self) -> PathBuf {
        self.cohort().join("manifest.txt")
    }

    /// Motion-corrupted copies, one subdirectory per corrupted split.
    pub fn corrupted(&self, split: Split) -> PathBuf {
        self.root.join("corrupted").join(split.as_str())
    }

    /// MC outputs for the corrupted test split.
    pub fn corrected(&self) -> PathBuf {
        self.root.join("corrected")
    }

    /// MG outputs: synthesized-motion copies of the clean train and test
    /// volumes.
    pub fn synthesized(&self) -> PathBuf {
        self.root.join("synthesized")
    }

    /// MC applied back over the synthesized test volumes. The pair
    /// (synthesized, roundtrip) scores the corrector on artifacts drawn from
    /// the same distribution it was trained against.
    pub fn roundtrip(&self) -> PathBuf {
        self.root.join("roundtrip")
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn mc(&self) -> PathBuf {
        self.models().join("mc.nbc")
    }

    pub fn mg(&self) -> PathBuf {
        self.models().join("mg.nbc")
    }

    pub fn dis_mc(&self) -> PathBuf {
        self.models().join("dis_mc.nbc")
    }

    pub fn dis_mg(&self) -> PathBuf {
        self.models().join("dis_mg.nbc")
    }

    pub fn cyclegan_history(&self) -> PathBuf {
        self.models().join("cyclegan_history.csv")
    }

    pub fn segnet(&self, aug: Augmentation) -> PathBuf {
        self.models().join(match aug {
            Augmentation::None => "segnet_clean.nbc",
            Augmentation::Motion => "segnet_augmented.nbc",
        })
    }

    pub fn segnet_history(&self, aug: Augmentation) -> PathBuf {
        self.models().join(match aug {
            Augmentation::None => "segnet_clean_history.csv",
            Augmentation::Motion => "segnet_augmented_history.csv",
        })
    }

    pub fn segmentations(&self, cond: Condition) -> PathBuf {
        self.root.join("segmentations").join(cond.name())
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn report(&self, cond: Condition) -> PathBuf {
        self.reports().join(format!("{}.csv", cond.name()))
    }

    pub fn summary(&self) -> PathBuf {
        self.reports().join("summary.csv")
    }

    pub fn psnr_table(&self) -> PathBuf {
        self.reports().join("correction_psnr.csv")
    }
}

/// The five test-time conditions. Each pairs one segmenter (trained without
/// or with motion augmentation) with one version of the test volumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    /// Plain segmenter on uncorrupted volumes; the upper anchor.
    MotionFree,
    /// Plain segmenter on corrupted volumes; the damage baseline.
    MotionSynthesized,
    /// Plain segmenter on MC-corrected volumes.
    MotionCorrected,
    /// Augmented segmenter on corrupted volumes.
    MotionAugmented,
    /// Augmented segmenter on MC-corrected volumes.
    MotionCorrectedAugmented,
}

pub const CONDITIONS: [Condition; 5] = [
    Condition::MotionFree,
    Condition::MotionSynthesized,
    Condition::MotionCorrected,
    Condition::MotionAugmented,
    Condition::MotionCorrectedAugmented,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TestInput {
    Clean,
    Corrupted,
    Corrected,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::MotionFree => "motion_free",
            Condition::MotionSynthesized => "motion_synthesized",
            Condition::MotionCorrected => "motion_corrected",
            Condition::MotionAugmented => "motion_augmented",
            Condition::MotionCorrectedAugmented => "motion_corrected_augmented",
        }
    }

    fn augmentation(self) -> Augmentation {
        match self {
            Condition::MotionFree | Condition::MotionSynthesized | Condition::MotionCorrected => {
                Augmentation::None
            }
            Condition::MotionAugmented | Condition::MotionCorrectedAugmented => {
                Augmentation::Motion
            }
        }
    }

    fn input(self) -> TestInput {
        match self {
            Condition::MotionFree => TestInput::Clean,
            Condition::MotionSynthesized | Condition::MotionAugmented => TestInput::Corrupted,
            Condition::MotionCorrected | Condition::MotionCorrectedAugmented => {
                TestInput::Corrected
            }
        }
    }
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

fn kernel_err(e: KernelError) -> CliError {
    match e {
        KernelError::Io(io) => CliError::Internal(io.to_string()),
        other => CliError::Data(other.to_string()),
    }
}

fn vol_err(path: &Path, e: VolumeError) -> CliError {
    match e {
        VolumeError::Io(io) => CliError::Internal(format!("{}: {io}", path.display())),
        other => CliError::Data(format!("{}: {other}", path.display())),
    }
}

fn phantom_err(e: PhantomError) -> CliError {
    match e {
        PhantomError::Io(io) => CliError::Internal(io.to_string()),
        PhantomError::BadConfig(m) => CliError::Config(m),
        other => CliError::Data(other.to_string()),
    }
}

fn motion_err(e: MotionError) -> CliError {
    match e {
        MotionError::Io(io) => CliError::Internal(io.to_string()),
        MotionError::BadConfig(m) => CliError::Config(m),
        other => CliError::Data(other.to_string()),
    }
}

fn gan_err(e: CycleGanError) -> CliError {
    match e {
        CycleGanError::Io(io) => CliError::Internal(io.to_string()),
        CycleGanError::BadConfig(m) => CliError::Config(m),
        CycleGanError::Kernel(k) => kernel_err(k),
        other => CliError::Data(other.to_string()),
    }
}

fn seg_err(e: SegError) -> CliError {
    match e {
        SegError::BadConfig(m) => CliError::Config(m),
        SegError::Kernel(k) => kernel_err(k),
        SegError::CycleGan(g) => gan_err(g),
        SegError::Volume(v) => match v {
            VolumeError::Io(io) => CliError::Internal(io.to_string()),
            other => CliError::Data(other.to_string()),
        },
        other => CliError::Data(other.to_string()),
    }
}

fn metric_err(e: MetricError) -> CliError {
    match e {
        MetricError::Io(io) => CliError::Internal(io.to_string()),
        other => CliError::Data(other.to_string()),
    }
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(internal)
}

fn read_volume(path: &Path) -> Result<Volume, CliError> {
    if !path.exists() {
        return Err(CliError::MissingInput(path.to_path_buf()));
    }
    volumeio::load_volume(path).map_err(|e| vol_err(path, e))
}

fn read_labels(path: &Path) -> Result<LabelMap, CliError> {
    if !path.exists() {
        return Err(CliError::MissingInput(path.to_path_buf()));
    }
    volumeio::load_labels(path).map_err(|e| vol_err(path, e))
}

fn read_params(path: &Path) -> Result<ModelParams, CliError> {
    if !path.exists() {
        return Err(CliError::MissingInput(path.to_path_buf()));
    }
    ModelParams::load(path).map_err(kernel_err)
}

fn write_volume(v: &Volume, path: &Path) -> Result<(), CliError> {
    volumeio::save_volume(v, path).map_err(|e| vol_err(path, e))
}

fn manifest_entries(tree: &Tree) -> Result<Vec<CohortEntry>, CliError> {
    let path = tree.manifest();
    if !path.exists() {
        return Err(CliError::MissingInput(path));
    }
    phantom::load_manifest(&path).map_err(phantom_err)
}

fn split_entries(entries: &[CohortEntry], split: Split) -> Vec<&CohortEntry> {
    entries.iter().filter(|e| e.split == split).collect()
}

pub(super) fn stage_phantom(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let tree = Tree::new(&cfg.out);
    ensure_dir(&tree.cohort())?;
    phantom::generate_cohort_with_splits(cfg.splits, &cfg.phantom, &tree.cohort())
        .map_err(phantom_err)?;
    Ok(())
}

pub(super) fn stage_corrupt(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let tree = Tree::new(&cfg.out);
    let entries = manifest_entries(&tree)?;
    for split in [Split::TrainMotion, Split::Test] {
        let dir = tree.corrupted(split);
        ensure_dir(&dir)?;
        let label = match split {
            Split::TrainMotion => "corrupt-train-motion",
            _ => "corrupt-test",
        };
        for (k, e) in split_entries(&entries, split).iter().enumerate() {
            let clean = read_volume(&tree.cohort().join(&e.volume_path))?;
            let mcfg = MotionConfig {
                seed: derive_seed(cfg.seed, label, k as u64),
                ..cfg.motion
            };
            let (mut bad, _traces) = corrupt_volume(&clean, &mcfg).map_err(motion_err)?;
            // Ringing pushes a few voxels outside [0, 1]; clamp so corrupted
            // volumes share the intensity range of clean ones and of the
            // generators' tanh-bounded outputs.
            for t in bad.data_mut() {
                *t = t.clamp(0.0, 1.0);
            }
            write_volume(&bad, &dir.join(&e.volume_path))?;
        }
    }
    Ok(())
}

fn load_split_slices(
    entries: &[CohortEntry],
    split: Split,
    dir: &Path,
) -> Result<Vec<Array2<f32>>, CliError> {
    let mut slices = Vec::new();
    for e in split_entries(entries, split) {
        let v = read_volume(&dir.join(&e.volume_path))?;
        let (_, _, nz) = v.dims();
        for z in 0..nz {
            slices.push(v.slice_xy(z));
        }
    }
    Ok(slices)
}

pub(super) fn stage_train_cyclegan(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let tree = Tree::new(&cfg.out);
    let entries = manifest_entries(&tree)?;
    let clean = load_split_slices(&entries, Split::TrainClean, &tree.cohort())?;
    let motion =
        load_split_slices(&entries, Split::TrainMotion, &tree.corrupted(Split::TrainMotion))?;
    let (models, history) =
        cyclegan::train_cyclegan(&clean, &motion, &cfg.cyclegan, &cfg.cycle_loss)
            .map_err(gan_err)?;
    ensure_dir(&tree.models())?;
    models.mc.save(&tree.mc()).map_err(kernel_err)?;
    models.mg.save(&tree.mg()).map_err(kernel_err)?;
    models.dis_mc.save(&tree.dis_mc()).map_err(kernel_err)?;
    models.dis_mg.save(&tree.dis_mg()).map_err(kernel_err)?;
    let mut f = File::create(tree.cyclegan_history()).map_err(internal)?;
    cyclegan::write_history(&mut f, &history, &cfg.provenance()).map_err(gan_err)?;
    Ok(())
}

fn write_seg_history(
    path: &Path,
    h: &SegHistory,
    provenance: &[String],
) -> Result<(), CliError> {
    let mut s = String::new();
    for line in provenance {
        let _ = writeln!(s, "# {line}");
    }
    let _ = writeln!(
        s,
        "# clean_volumes={} training_volumes={} patches={}",
        h.n_clean_volumes, h.n_training_volumes, h.n_patches
    );
    let _ = writeln!(s, "epoch,mean_loss");
    for (i, loss) in h.epoch_loss.iter().enumerate() {
        let _ = writeln!(s, "{i},{loss}");
    }
    fs::write(path, s).map_err(internal)
}

fn load_training_pairs(cfg: &ExperimentConfig) -> Result<Vec<(Volume, LabelMap)>, CliError> {
    let tree = Tree::new(&cfg.out);
    let entries = manifest_entries(&tree)?;
    let mut pairs = Vec::new();
    for e in split_entries(&entries, Split::TrainClean) {
        let v = read_volume(&tree.cohort().join(&e.volume_path))?;
        let l = read_labels(&tree.cohort().join(&e.labels_path))?;
        pairs.push((v, l));
    }
    Ok(pairs)
}

fn train_segnet_mode(cfg: &ExperimentConfig, aug: Augmentation) -> Result<(), CliError> {
    let tree = Tree::new(&cfg.out);
    let pairs = load_training_pairs(cfg)?;
    let mg = match aug {
        Augmentation::None => None,
        Augmentation::Motion => Some(read_params(&tree.mg())?),
    };
    let scfg = SegTrainConfig { augmentation: aug, ..cfg.segnet.clone() };
    let (params, history) = segnet::train_segnet(&pairs, &scfg, mg.as_ref()).map_err(seg_err)?;
    ensure_dir(&tree.models())?;
    params.save(&tree.segnet(aug)).map_err(kernel_err)?;
    write_seg_history(&tree.segnet_history(aug), &history, &cfg.provenance())
}

/// Standalone `train-segnet`: mode comes from `segnet.augmentation`.
pub(super) fn stage_train_segnet_configured(cfg: &ExperimentConfig) -> Result<(), CliError> {
    train_segnet_mode(cfg, cfg.segnet.augmentation)
}

pub(super) fn stage_correct(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let tree = Tree::new(&cfg.out);
    let entries = manifest_entries(&tree)?;
    let mc = read_params(&tree.mc())?;
    let test = split_entries(&entries, Split::Test);
    ensure_dir(&tree.corrected())?;
    for e in &test {
        let v = read_volume(&tree.corrupted(Split::Test).join(&e.volume_path))?;
        let fixed = cyclegan::correct(&mc, &v).map_err(gan_err)?;
        write_volume(&fixed, &tree.corrected().join(&e.volume_path))?;
    }
    // Second pass over the MG-synthesized test copies (from `add-motion`):
    // unlike the simulator's artifacts, these are in-distribution for the
    // trained pair, so (synthesized, roundtrip) isolates correction quality
    // from the domain gap between simulated and learned artifacts.
    ensure_dir(&tree.roundtrip())?;
    for e in &test {
        let v = read_volume(&tree.synthesized().join(&e.volume_path))?;
        let fixed = cyclegan::correct(&mc, &v).map_err(gan_err)?;
        write_volume(&fixed, &tree.roundtrip().join(&e.volume_path))?;
    }
    Ok(())
}

pub(super) fn stage_add_motion(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let tree = Tree::new(&cfg.out);
    let entries = manifest_entries(&tree)?;
    let mg = read_params(&tree.mg())?;
    ensure_dir(&tree.synthesized())?;
    // Train-clean copies feed augmentation inspection; test copies feed the
    // round-trip pass of `correct`.
    for split in [Split::TrainClean, Split::Test] {
        for e in split_entries(&entries, split) {
            let v = read_volume(&tree.cohort().join(&e.volume_path))?;
            let synth = cyclegan::add_motion(&mg, &v).map_err(gan_err)?;
            write_volume(&synth, &tree.synthesized().join(&e.volume_path))?;
        }
    }
    Ok(())
}

pub(super) fn stage_segment(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let tree = Tree::new(&cfg.out);
    let entries = manifest_entries(&tree)?;
    let test = split_entries(&entries, Split::Test);
    let seg_clean = read_params(&tree.segnet(Augmentation::None))?;
    let seg_aug = read_params(&tree.segnet(Augmentation::Motion))?;
    for cond in CONDITIONS {
        let dir = tree.segmentations(cond);
        ensure_dir(&dir)?;
        let model = match cond.augmentation() {
            Augmentation::None => &seg_clean,
            Augmentation::Motion => &seg_aug,
        };
        let input_dir = match cond.input() {
            TestInput::Clean => tree.cohort(),
            TestInput::Corrupted => tree.corrupted(Split::Test),
            TestInput::Corrected => tree.corrected(),
        };
        for e in &test {
            let v = read_volume(&input_dir.join(&e.volume_path))?;
            let labels = segnet::segment_volume(model, &v).map_err(seg_err)?;
            // Predictions reuse the reference label file name so evaluation
            // pairs them by name.
            volumeio::save_labels(&labels, dir.join(&e.labels_path))
                .map_err(|err| vol_err(&dir.join(&e.labels_path), err))?;
        }
    }
    Ok(())
}

pub(super) fn stage_evaluate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let tree = Tree::new(&cfg.out);
    let entries = manifest_entries(&tree)?;
    let test = split_entries(&entries, Split::Test);
    ensure_dir(&tree.reports())?;

    let mut summary = String::new();
    for line in cfg.provenance() {
        let _ = writeln!(summary, "# {line}");
    }
    let _ = writeln!(summary, "condition,mean_dc");
    for cond in CONDITIONS {
        let mut reports = Vec::with_capacity(test.len());
        for e in &test {
            let pred = read_labels(&tree.segmentations(cond).join(&e.labels_path))?;
            let reference = read_labels(&tree.cohort().join(&e.labels_path))?;
            reports.push(metrics::evaluate(&pred, &reference).map_err(metric_err)?);
        }
        let agg = metrics::aggregate(&reports);
        agg.save(&tree.report(cond), &cfg.provenance()).map_err(metric_err)?;
        match agg.mean_dc {
            Some(dc) => {
                let _ = writeln!(summary, "{},{dc:.6}", cond.name());
            }
            None => {
                let _ = writeln!(summary, "{},", cond.name());
            }
        }
    }
    fs::write(tree.summary(), summary).map_err(internal)?;

    // PSNR sides of the correction story, both against the clean reference:
    // (corrupted, corrected) is the simulator pair, (synthesized, roundtrip)
    // the learned-artifact pair; gain_db = roundtrip - synthesized.
    let mut table = String::new();
    for line in cfg.provenance() {
        let _ = writeln!(table, "# {line}");
    }
    let _ = writeln!(
        table,
        "scan,psnr_corrupted_db,psnr_corrected_db,psnr_synthesized_db,psnr_roundtrip_db,gain_db"
    );
    let mut mean = [0.0f64; 5];
    for e in &test {
        let reference = read_volume(&tree.cohort().join(&e.volume_path))?;
        let mut row = [0.0f64; 5];
        for (i, dir) in [
            tree.corrupted(Split::Test),
            tree.corrected(),
            tree.synthesized(),
            tree.roundtrip(),
        ]
        .iter()
        .enumerate()
        {
            let v = read_volume(&dir.join(&e.volume_path))?;
            row[i] = metrics::psnr(&reference, &v).map_err(metric_err)?;
        }
        row[4] = row[3] - row[2];
        let scan = e.volume_path.file_stem().and_then(|s| s.to_str()).unwrap_or("scan");
        let _ = write!(table, "{scan}");
        for v in row {
            let _ = write!(table, ",{v:.4}");
        }
        let _ = writeln!(table);
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let n = test.len() as f64;
    let _ = write!(table, "mean");
    for m in mean {
        let _ = write!(table, ",{:.4}", m / n);
    }
    let _ = writeln!(table);
    fs::write(tree.psnr_table(), table).map_err(internal)?;
    Ok(())
}

pub(super) fn stage_experiment(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let steps: [(&str, fn(&ExperimentConfig) -> Result<(), CliError>); 9] = [
        ("phantom", stage_phantom),
        ("corrupt", stage_corrupt),
        ("train-cyclegan", stage_train_cyclegan),
        ("train-segnet clean", |c| train_segnet_mode(c, Augmentation::None)),
        ("train-segnet augmented", |c| train_segnet_mode(c, Augmentation::Motion)),
        ("add-motion", stage_add_motion),
        ("correct", stage_correct),
        ("segment", stage_segment),
        ("evaluate", stage_evaluate),
    ];
    for (i, (name, step)) in steps.iter().enumerate() {
        eprintln!("[{}/{}] {name}", i + 1, steps.len());
        let t0 = std::time::Instant::now();
        step(cfg)?;
        eprintln!("[{}/{}] {name}: done in {:.1}s", i + 1, steps.len(), t0.elapsed().as_secs_f32());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn condition_names_are_distinct_and_stable() {
        let names: Vec<&str> = CONDITIONS.iter().map(|c| c.name()).collect();
        assert_eq!(
            names,
            vec![
                "motion_free",
                "motion_synthesized",
                "motion_corrected",
                "motion_augmented",
                "motion_corrected_augmented"
            ]
        );
    }

    #[test]
    fn condition_wiring_pairs_models_and_inputs() {
        use Condition::*;
        assert_eq!(MotionFree.augmentation(), Augmentation::None);
        assert_eq!(MotionFree.input(), TestInput::Clean);
        assert_eq!(MotionSynthesized.augmentation(), Augmentation::None);
        assert_eq!(MotionSynthesized.input(), TestInput::Corrupted);
        assert_eq!(MotionCorrected.augmentation(), Augmentation::None);
        assert_eq!(MotionCorrected.input(), TestInput::Corrected);
        assert_eq!(MotionAugmented.augmentation(), Augmentation::Motion);
        assert_eq!(MotionAugmented.input(), TestInput::Corrupted);
        assert_eq!(MotionCorrectedAugmented.augmentation(), Augmentation::Motion);
        assert_eq!(MotionCorrectedAugmented.input(), TestInput::Corrected);
    }

    #[test]
    fn tree_paths_nest_under_root() {
        let t = Tree::new(Path::new("/x"));
        assert_eq!(t.manifest(), PathBuf::from("/x/cohort/manifest.txt"));
        assert_eq!(
            t.corrupted(Split::TrainMotion),
            PathBuf::from("/x/corrupted/train-motion")
        );
        assert_eq!(t.mc(), PathBuf::from("/x/models/mc.nbc"));
        assert_eq!(t.roundtrip(), PathBuf::from("/x/roundtrip"));
        assert_eq!(
            t.segnet(Augmentation::Motion),
            PathBuf::from("/x/models/segnet_augmented.nbc")
        );
        assert_eq!(
            t.report(Condition::MotionFree),
            PathBuf::from("/x/reports/motion_free.csv")
        );
        assert_eq!(t.psnr_table(), PathBuf::from("/x/reports/correction_psnr.csv"));
    }
}
