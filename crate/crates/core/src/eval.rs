//! Segmentation metrics, evaluation reports and the experiment driver.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::filters::{FilterConfig, FilterKind};
use crate::model::{widened_widths, FilterHook, ForwardOptions, LayeredNetwork, TAP_LAYERS};
use crate::nn::GroupSelector;
use crate::style::LayerId;
use crate::tensor::Tensor;
use crate::toyscenes::{CorruptionKind, CorruptionSpec, Dataset, Split, CLASS_NAMES};
use crate::train::{finetune_task_only, train_stage1, train_stage2, TrainConfig};
use crate::viz::{image_tile, label_tile, save_grid};

pub const NUM_CLASSES: usize = 4;
/// Classes averaged into the reported mIoU: road, vehicle, vulnerable.
pub const FOREGROUND: [u8; 3] = [1, 2, 3];
pub const IGNORE_LABEL: u8 = crate::autodiff::IGNORE_LABEL;

/// Dataset-wide confusion counts, `counts[label][pred]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    /// Add one prediction map; pixels labeled [`IGNORE_LABEL`] are skipped.
    pub fn accumulate(&mut self, preds: &Tensor<u8>, labels: &Tensor<u8>) -> Result<()> {
        if preds.shape() != labels.shape() {
            return Err(Error::shape("miou", preds.shape(), labels.shape()));
        }
        for (&p, &l) in preds.data().iter().zip(labels.data()) {
            if l == IGNORE_LABEL {
                continue;
            }
            let (p, l) = (p as usize, l as usize);
            if p >= self.classes || l >= self.classes {
                return Err(Error::LabelOutOfRange { label: p.max(l) as u8, classes: self.classes });
            }
            self.counts[l * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn get(&self, label: usize, pred: usize) -> u64 {
        self.counts[label * self.classes + pred]
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class appears in neither
    /// predictions nor labels.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.get(class, class);
        let fn_: u64 = (0..self.classes).map(|p| self.get(class, p)).sum::<u64>() - tp;
        let fp: u64 = (0..self.classes).map(|l| self.get(l, class)).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    /// Mean IoU over `classes`, skipping classes absent from both sides.
    pub fn mean_iou(&self, classes: &[u8]) -> Option<f64> {
        let ious: Vec<f64> = classes.iter().filter_map(|&c| self.iou(c as usize)).collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouResult {
    pub per_class: Vec<(u8, Option<f64>)>,
    pub mean: Option<f64>,
}

/// IoU of each class in `classes` for a single prediction map.
pub fn miou(preds: &Tensor<u8>, labels: &Tensor<u8>, classes: &[u8]) -> Result<IouResult> {
    let n = classes.iter().copied().max().map_or(0, |m| m as usize + 1);
    let seen = preds.data().iter().chain(labels.data()).filter(|&&v| v != IGNORE_LABEL).copied().max();
    let mut cm = ConfusionMatrix::new(n.max(seen.map_or(0, |m| m as usize + 1)));
    cm.accumulate(preds, labels)?;
    Ok(IouResult {
        per_class: classes.iter().map(|&c| (c, cm.iou(c as usize))).collect(),
        mean: cm.mean_iou(classes),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub dataset: String,
    pub corruption: Option<CorruptionSpec>,
    pub filter: Option<FilterHook>,
    pub checkpoint_hash: String,
    pub seed: u64,
    /// IoU per class name; `null` when the class never occurs.
    pub per_class_iou: BTreeMap<String, Option<f64>>,
    /// Mean over road, vehicle and vulnerable, in `[0, 1]`.
    pub miou: f64,
    pub pixels: u64,
    pub wall_clock_secs: f64,
}

impl MetricsReport {
    /// Copy with the wall-clock time zeroed, for determinism comparisons.
    pub fn canonical(&self) -> Self {
        Self { wall_clock_secs: 0.0, ..self.clone() }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Evaluate `net` on every sample of `data`.
pub fn evaluate(
    model: &str,
    net: &LayeredNetwork<f32>,
    checkpoint_hash: &str,
    data: &Dataset,
    opts: &ForwardOptions,
    seed: u64,
) -> Result<MetricsReport> {
    let started = Instant::now();
    let mut cm = ConfusionMatrix::new(NUM_CLASSES);
    for s in &data.samples {
        cm.accumulate(&net.predict(&s.image, opts)?, &s.labels)?;
    }
    let per_class_iou = CLASS_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| (name.to_string(), cm.iou(i)))
        .collect();
    Ok(MetricsReport {
        model: model.to_string(),
        dataset: data.id(),
        corruption: data.manifest.corruption,
        filter: opts.filter.clone(),
        checkpoint_hash: checkpoint_hash.to_string(),
        seed,
        per_class_iou,
        miou: cm.mean_iou(&FOREGROUND).unwrap_or(0.0),
        pixels: cm.counts.iter().sum(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    BaselineVsStyleless,
    FiltersAblation,
    CapacityAblation,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::BaselineVsStyleless, Protocol::FiltersAblation, Protocol::CapacityAblation];

    pub fn tag(self) -> &'static str {
        match self {
            Protocol::BaselineVsStyleless => "baseline-vs-styleless",
            Protocol::FiltersAblation => "filters-ablation",
            Protocol::CapacityAblation => "capacity-ablation",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.tag() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown protocol {s:?}")))
    }
}

/// Grid searched by the filters ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterGrid {
    pub p: Vec<f64>,
    pub tau: Vec<f64>,
    pub layer_sets: Vec<Vec<LayerId>>,
}

impl Default for FilterGrid {
    fn default() -> Self {
        Self {
            p: vec![5.0, 10.0, 20.0],
            tau: vec![2.0, 4.0, 8.0],
            layer_sets: TAP_LAYERS.iter().map(|&l| vec![l]).chain([TAP_LAYERS.to_vec()]).collect(),
        }
    }
}

impl FilterGrid {
    /// Every distinct configuration of `kind` in the grid.
    pub fn configs(&self, kind: FilterKind, seed: u64) -> Vec<FilterHook> {
        let ps: &[f64] = if kind == FilterKind::Weighting { &[0.0] } else { &self.p };
        let taus: &[f64] = if kind == FilterKind::Noise { &self.tau } else { &[1.0] };
        let mut out = Vec::new();
        for layers in &self.layer_sets {
            for &p in ps {
                for &tau in taus {
                    out.push(FilterHook {
                        config: FilterConfig { kind, p, tau, seed },
                        layers: layers.clone(),
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub stage1: TrainConfig,
    pub kinds: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    pub filter_grid: FilterGrid,
    /// Corruptions used to pick each filter's configuration on the
    /// validation split.
    pub filter_selection: Vec<CorruptionSpec>,
    /// Severities the capacity ablation evaluates.
    pub capacity_severities: Vec<u8>,
    /// Dataset directories replacing the generated splits.
    pub sources: DataSources,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataSources {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            train_size: 256,
            val_size: 32,
            test_size: 48,
            stage1: TrainConfig::stage1(24, 0),
            kinds: CorruptionKind::ALL.to_vec(),
            severities: vec![1, 2, 3, 4, 5],
            filter_grid: FilterGrid::default(),
            filter_selection: CorruptionKind::ALL
                .into_iter()
                .map(|kind| CorruptionSpec { kind, severity: 3, seed: 0 })
                .collect(),
            capacity_severities: vec![5],
            sources: DataSources::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn stage1_for(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, data: format!("train-s{seed}-n{}", self.train_size), ..self.stage1.clone() }
    }

    pub fn stage2_for(&self, seed: u64) -> TrainConfig {
        TrainConfig::stage2_from(&self.stage1_for(seed))
    }
}

/// Models trained for one seed.
#[derive(Debug, Clone)]
pub struct SeedModels {
    pub baseline: Checkpoint,
    pub styleless: Checkpoint,
    pub widened: Option<Checkpoint>,
    pub baseline_log: crate::train::TrainLog,
    pub styleless_log: crate::train::TrainLog,
}

#[derive(Debug, Clone)]
pub struct SeedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Median of finite values; `NaN` for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub model: String,
    pub dataset: String,
    pub miou: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedFilter {
    pub seed: u64,
    pub hook: FilterHook,
    pub val_miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub protocol: Protocol,
    pub reports: Vec<MetricsReport>,
    pub medians: Vec<MedianRow>,
    pub selected_filters: Vec<SelectedFilter>,
    pub parameter_counts: BTreeMap<String, usize>,
}

/// Dataset column label: `clean` or e.g. `haze-3`.
pub fn dataset_column(report: &MetricsReport) -> String {
    report.corruption.map_or_else(|| "clean".to_string(), |c| c.tag())
}

impl ReportBundle {
    fn finish(protocol: Protocol, reports: Vec<MetricsReport>) -> Self {
        let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for r in &reports {
            groups.entry((r.model.clone(), dataset_column(r))).or_default().push(r.miou);
        }
        let medians = groups
            .into_iter()
            .map(|((model, dataset), v)| MedianRow { model, dataset, miou: median(&v), seeds: v.len() })
            .collect();
        Self { protocol, reports, medians, selected_filters: Vec::new(), parameter_counts: BTreeMap::new() }
    }

    /// Median mIoU of `model` on the column `dataset`.
    pub fn median(&self, model: &str, dataset: &str) -> Option<f64> {
        self.medians.iter().find(|r| r.model == model && r.dataset == dataset).map(|r| r.miou)
    }

    /// Per-seed mIoU of `model`, averaged over the given dataset columns,
    /// then the median over seeds.
    pub fn median_of_means(&self, model: &str, datasets: &[String]) -> f64 {
        let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for r in self.reports.iter().filter(|r| r.model == model && datasets.contains(&dataset_column(r))) {
            by_seed.entry(r.seed).or_default().push(r.miou);
        }
        let means: Vec<f64> = by_seed.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
        median(&means)
    }

    pub fn models(&self) -> Vec<String> {
        let mut m: Vec<String> = Vec::new();
        for r in &self.reports {
            if !m.contains(&r.model) {
                m.push(r.model.clone());
            }
        }
        m
    }

    /// Median mIoU table in percent: one row per model, one column per dataset.
    pub fn table_csv(&self) -> String {
        let mut columns: Vec<String> = Vec::new();
        for r in &self.reports {
            let c = dataset_column(r);
            if !columns.contains(&c) {
                columns.push(c);
            }
        }
        let mut out = format!("model,{}\n", columns.join(","));
        for model in self.models() {
            let cells: Vec<String> = columns
                .iter()
                .map(|c| self.median(&model, c).map_or_else(String::new, |v| format!("{:.2}", 100.0 * v)))
                .collect();
            out.push_str(&format!("{model},{}\n", cells.join(",")));
        }
        out
    }

    /// Reports with wall-clock times zeroed.
    pub fn canonical(&self) -> Self {
        Self {
            reports: self.reports.iter().map(MetricsReport::canonical).collect(),
            ..self.clone()
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("bundle.json"), serde_json::to_string_pretty(self)? + "\n")?;
        fs::write(dir.join("table.csv"), self.table_csv())?;
        let reports = dir.join("reports");
        fs::create_dir_all(&reports)?;
        for (i, r) in self.reports.iter().enumerate() {
            let name = format!("{i:04}-{}-s{}-{}.json", r.model, r.seed, dataset_column(r));
            fs::write(reports.join(name), r.to_json()? + "\n")?;
        }
        Ok(())
    }
}

/// Trains (once per seed) and evaluates the models each protocol needs.
#[derive(Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    data: BTreeMap<u64, SeedData>,
    models: BTreeMap<u64, SeedModels>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Self {
        Self { config, data: BTreeMap::new(), models: BTreeMap::new() }
    }

    pub fn data(&mut self, seed: u64) -> Result<&SeedData> {
        if !self.data.contains_key(&seed) {
            let c = &self.config;
            let get = |path: &Option<PathBuf>, split, n| match path {
                Some(p) => Dataset::load(p),
                None => Dataset::generate(split, n, seed),
            };
            let d = SeedData {
                train: get(&c.sources.train, Split::Train, c.train_size)?,
                val: get(&c.sources.val, Split::Val, c.val_size)?,
                test: get(&c.sources.test, Split::Test, c.test_size)?,
            };
            self.data.insert(seed, d);
        }
        Ok(&self.data[&seed])
    }

    /// Baseline and StyleLess models for `seed`; the widened backbone too
    /// when `widened` is set.
    pub fn models(&mut self, seed: u64, widened: bool) -> Result<&SeedModels> {
        let train = self.data(seed)?.train.clone();
        if !self.models.contains_key(&seed) {
            let s1 = self.config.stage1_for(seed);
            let base = train_stage1(LayeredNetwork::new(seed)?, &train, &s1)?;
            let s2 = self.config.stage2_for(seed);
            let sl = train_stage2(&base.checkpoint, &train, &s2)?;
            self.models.insert(
                seed,
                SeedModels {
                    baseline: base.checkpoint,
                    styleless: sl.checkpoint,
                    widened: None,
                    baseline_log: base.log,
                    styleless_log: sl.log,
                },
            );
        }
        if widened && self.models[&seed].widened.is_none() {
            let target = self.models[&seed].styleless.network.count_parameters(GroupSelector::All);
            let s1 = self.config.stage1_for(seed);
            let wide = train_stage1(LayeredNetwork::with_widths(widened_widths(target), seed)?, &train, &s1)?;
            // Same number of extra task-only epochs the StyleLess model got.
            let s2 = TrainConfig { epochs: self.config.stage2_for(seed).epochs, ..s1 };
            let wide = finetune_task_only(&wide.checkpoint, &train, &s2)?;
            self.models.get_mut(&seed).expect("cached").widened = Some(wide.checkpoint);
        }
        Ok(&self.models[&seed])
    }

    fn corrupted_sets(&self, base: &Dataset, seed: u64, severities: &[u8]) -> Result<Vec<Dataset>> {
        let mut sets = vec![base.clone()];
        for &kind in &self.config.kinds {
            for &severity in severities {
                sets.push(base.corrupted(&CorruptionSpec::new(kind, severity, seed)?)?);
            }
        }
        Ok(sets)
    }

    pub fn run(&mut self, protocol: Protocol) -> Result<ReportBundle> {
        let seeds = self.config.seeds.clone();
        if seeds.is_empty() {
            return Err(Error::InvalidConfig("experiment needs at least one seed".into()));
        }
        let mut reports = Vec::new();
        let mut selected = Vec::new();
        let mut counts = BTreeMap::new();
        for &seed in &seeds {
            let widened = protocol == Protocol::CapacityAblation;
            let models = self.models(seed, widened)?.clone();
            let data = self.data(seed)?.clone();
            let none = ForwardOptions::default();
            let base_hash = models.baseline.hash()?;
            match protocol {
                Protocol::BaselineVsStyleless => {
                    let sl_hash = models.styleless.hash()?;
                    for set in self.corrupted_sets(&data.test, seed, &self.config.severities)? {
                        reports.push(evaluate("baseline", &models.baseline.network, &base_hash, &set, &none, seed)?);
                        reports.push(evaluate("styleless", &models.styleless.network, &sl_hash, &set, &none, seed)?);
                    }
                }
                Protocol::FiltersAblation => {
                    let val_sets: Vec<Dataset> = self
                        .config
                        .filter_selection
                        .iter()
                        .map(|s| data.val.corrupted(&CorruptionSpec { seed, ..*s }))
                        .collect::<Result<_>>()?;
                    let test_sets = self.corrupted_sets(&data.test, seed, &self.config.severities)?;
                    for set in &test_sets {
                        reports.push(evaluate("baseline", &models.baseline.network, &base_hash, set, &none, seed)?);
                    }
                    for kind in FilterKind::ALL {
                        let hook = select_filter(&models.baseline.network, &val_sets, &self.config.filter_grid, kind, seed)?;
                        let opts = ForwardOptions { filter: Some(hook.hook.clone()) };
                        selected.push(hook);
                        for set in &test_sets {
                            reports.push(evaluate(&format!("filter-{kind}"), &models.baseline.network, &base_hash, set, &opts, seed)?);
                        }
                    }
                }
                Protocol::CapacityAblation => {
                    let wide = models.widened.as_ref().expect("trained above");
                    let sl_hash = models.styleless.hash()?;
                    let wide_hash = wide.hash()?;
                    counts.insert("baseline".into(), models.baseline.network.count_parameters(GroupSelector::All));
                    counts.insert("styleless".into(), models.styleless.network.count_parameters(GroupSelector::All));
                    counts.insert("widened".into(), wide.network.count_parameters(GroupSelector::All));
                    for set in self.corrupted_sets(&data.test, seed, &self.config.capacity_severities)? {
                        reports.push(evaluate("baseline", &models.baseline.network, &base_hash, &set, &none, seed)?);
                        reports.push(evaluate("styleless", &models.styleless.network, &sl_hash, &set, &none, seed)?);
                        reports.push(evaluate("widened", &wide.network, &wide_hash, &set, &none, seed)?);
                    }
                }
            }
        }
        let mut bundle = ReportBundle::finish(protocol, reports);
        bundle.selected_filters = selected;
        bundle.parameter_counts = counts;
        Ok(bundle)
    }

    /// Qualitative grid for one seed: input, labels, baseline prediction and
    /// StyleLess prediction, for the clean image and each corruption at
    /// `severity`.
    pub fn save_qualitative(&mut self, seed: u64, severity: u8, samples: usize, path: impl AsRef<Path>) -> Result<()> {
        let models = self.models(seed, false)?.clone();
        let test = self.data(seed)?.test.clone();
        let none = ForwardOptions::default();
        let mut rows = Vec::new();
        for i in 0..samples.min(test.len()) {
            let clean = &test.samples[i];
            let mut images = vec![clean.image.clone()];
            for &kind in &self.config.kinds {
                images.push(crate::toyscenes::corrupt(&clean.image, &CorruptionSpec::new(kind, severity, seed)?)?);
            }
            for img in images {
                rows.push(vec![
                    image_tile(&img)?,
                    label_tile(&clean.labels)?,
                    label_tile(&models.baseline.network.predict(&img, &none)?)?,
                    label_tile(&models.styleless.network.predict(&img, &none)?)?,
                ]);
            }
        }
        save_grid(path, &rows)
    }
}

/// Best configuration of `kind` in the grid by mean validation mIoU; ties
/// keep the first configuration.
pub fn select_filter(net: &LayeredNetwork<f32>, val_sets: &[Dataset], grid: &FilterGrid, kind: FilterKind, seed: u64) -> Result<SelectedFilter> {
    let mut best: Option<SelectedFilter> = None;
    for hook in grid.configs(kind, seed) {
        let opts = ForwardOptions { filter: Some(hook.clone()) };
        let mut total = 0.0;
        for set in val_sets {
            total += evaluate("", net, "", set, &opts, seed)?.miou;
        }
        let score = total / val_sets.len().max(1) as f64;
        if best.as_ref().is_none_or(|b| score > b.val_miou) {
            best = Some(SelectedFilter { seed, hook, val_miou: score });
        }
    }
    best.ok_or_else(|| Error::InvalidConfig("empty filter grid".into()))
}

/// Load a checkpoint and evaluate it on a dataset directory.
pub fn evaluate_paths(model: impl AsRef<Path>, data: impl AsRef<Path>, opts: &ForwardOptions, seed: u64) -> Result<MetricsReport> {
    let ckpt = Checkpoint::load(model.as_ref())?;
    let ds = Dataset::load(data.as_ref())?;
    let label = model.as_ref().file_name().map_or_else(|| "model".into(), |n| n.to_string_lossy().into_owned());
    evaluate(&label, &ckpt.network, &ckpt.hash()?, &ds, opts, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(h: usize, w: usize, v: &[u8]) -> Tensor<u8> {
        Tensor::new([h, w], v.to_vec()).unwrap()
    }

    #[test]
    fn miou_examples() {
        let labels = t(2, 2, &[1, 1, 0, 0]);
        let r = miou(&labels, &labels, &[0, 1]).unwrap();
        assert_eq!(r.mean, Some(1.0));
        let r = miou(&t(2, 2, &[1, 0, 0, 0]), &labels, &[1]).unwrap();
        assert_eq!(r.per_class, vec![(1, Some(0.5))]);
        let r = miou(&t(2, 2, &[0, 0, 0, 0]), &labels, &[1]).unwrap();
        assert_eq!(r.per_class, vec![(1, Some(0.0))]);
        assert!(miou(&t(1, 2, &[0, 0]), &labels, &[1]).is_err());
    }

    #[test]
    fn absent_classes_are_excluded() {
        let labels = t(1, 2, &[1, 1]);
        let r = miou(&labels, &labels, &[1, 2, 3]).unwrap();
        assert_eq!(r.per_class[1], (2, None));
        assert_eq!(r.mean, Some(1.0));
    }

    #[test]
    fn ignore_label_is_skipped() {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&t(1, 3, &[1, 2, 3]), &t(1, 3, &[1, 255, 3])).unwrap();
        assert_eq!(cm.counts.iter().sum::<u64>(), 2);
    }

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn report_roundtrip() {
        let ds = Dataset::generate(Split::Test, 2, 0).unwrap();
        let net = LayeredNetwork::new(0).unwrap();
        let r = evaluate("m", &net, "h", &ds, &ForwardOptions::default(), 0).unwrap();
        assert_eq!(MetricsReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        assert!((0.0..=1.0).contains(&r.miou));
        assert_eq!(r.pixels, 2 * 64 * 64);
    }

    #[test]
    fn grid_configs() {
        let g = FilterGrid::default();
        assert_eq!(g.configs(FilterKind::Remove, 0).len(), 15);
        assert_eq!(g.configs(FilterKind::Weighting, 0).len(), 5);
        assert_eq!(g.configs(FilterKind::Noise, 0).len(), 45);
    }
}
