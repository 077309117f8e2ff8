// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    layers, lookup, settings, EvalFlags, ExportFlags, GenFlags, PatchFlags, ProbeFlags, RunManifest, SweepFlags,
    TrainFlags,
};
use crate::diffcore::Float;
use crate::error::{Error, Result};
use crate::evalsuite::{export_curves, report_text, table_by_step, table_by_vas, Provenance, SweepCurve};
use crate::interpret::{
    compare_fixed_varied, diagonal_stats, filter_combo, make_pairs, run_grid, step_boundaries, window_sweep,
    CorruptionKind, CorruptionSpec, Metric, OperandCombo, Slot,
};
use crate::llmprobe::mock::{MockServer, MockStyle};
use crate::llmprobe::{run_probe, ProbeConfig};
use crate::minigpt::{load_checkpoint, Component, ModelConfig, ModelState};
use crate::taskgen::{
    build_dataset, generate_vas_stratified, read_gen_config, read_problems, write_json, write_jsonl, DatasetPaths,
    GenConfig, OrderMode, OrderRegime, Problem, Split,
};
use crate::trainer::{evaluate, outcomes, train as train_model, EvalSets, TrainConfig};

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("missing required setting `{key}`")))
}

fn print_json(v: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// `a..b` (inclusive) or a comma list of positive integers.
pub(crate) fn parse_range_list(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("`{s}` is neither `a..b` nor a comma list of integers"));
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}

fn parse_window(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("window `{s}` must look like `2x2`"));
    let (a, b) = s.split_once('x').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Precision {
    F32,
    F64,
}

fn precision(s: &str) -> Result<Precision> {
    serde_json::from_value(Value::String(s.into()))
        .map_err(|_| Error::Config(format!("precision `{s}` must be f32 or f64")))
}

// ---------------------------------------------------------------- gen

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct GenSettings {
    pub steps: String,
    pub orders: Vec<OrderMode>,
    pub k: usize,
    pub test_k: usize,
    pub templates_per_length: usize,
    pub test_templates_per_length: usize,
    pub ood_extra: Vec<usize>,
    pub orders_per_template: usize,
    pub seed: u64,
    pub vas_steps: Vec<usize>,
    pub vas_per_cell: usize,
}

impl Default for GenSettings {
    fn default() -> Self {
        let g = GenConfig::default();
        GenSettings {
            steps: format!("1..{}", g.max_train_steps_len),
            orders: vec![OrderMode::Forward],
            k: g.k,
            test_k: g.test_k,
            templates_per_length: g.templates_per_length,
            test_templates_per_length: g.test_templates_per_length,
            ood_extra: g.ood_extra,
            orders_per_template: g.orders_per_template,
            seed: g.seed,
            vas_steps: Vec::new(),
            vas_per_cell: 100,
        }
    }
}

impl GenSettings {
    fn resolve(&self) -> Result<(GenConfig, OrderRegime)> {
        let steps = parse_range_list(&self.steps)?;
        let contiguous = steps.iter().enumerate().all(|(i, &s)| s == i + 1);
        if steps.is_empty() || !contiguous {
            return Err(Error::Config(format!("steps `{}` must run from 1, as in `1..5`", self.steps)));
        }
        if self.orders.is_empty() {
            return Err(Error::Config("orders must be non-empty".into()));
        }
        if self.orders.contains(&OrderMode::FixedShuffled) {
            return Err(Error::Config("fixed_shuffled is a probe order, not a dataset order".into()));
        }
        let regime =
            if self.orders == [OrderMode::Forward] { OrderRegime::FixedForward } else { OrderRegime::MultiOrder };
        let cfg = GenConfig {
            templates_per_length: self.templates_per_length,
            test_templates_per_length: self.test_templates_per_length,
            k: self.k,
            test_k: self.test_k,
            max_train_steps_len: steps.len(),
            ood_extra: self.ood_extra.clone(),
            orders_per_template: self.orders_per_template,
            seed: self.seed,
            test_orders: (regime == OrderRegime::MultiOrder).then(|| self.orders.clone()),
            ..GenConfig::default()
        };
        cfg.validate()?;
        Ok((cfg, regime))
    }
}

pub(super) fn gen(f: GenFlags) -> Result<()> {
    let started = Instant::now();
    let (s, flat) = settings(&GenSettings::default(), f.common.config.as_deref(), &f)?;
    let (cfg, regime) = s.resolve()?;
    let out = &f.common.out;
    create_out(out)?;
    let mut manifest = RunManifest::new("gen", flat);
    let (ds, summary) = build_dataset(&cfg, regime, out)?;
    manifest.outputs.extend(summary.files.iter().cloned());
    let paths = DatasetPaths::new(out);
    let prefixes = ds.prefix_set();
    let mut stratified = Vec::new();
    for &n in &s.vas_steps {
        let split = if n <= cfg.max_train_steps_len { Split::TestId } else { Split::TestOod };
        let ps = generate_vas_stratified(cfg.seed, &prefixes, n, s.vas_per_cell, &s.orders, split)?;
        let p = paths.stratified(n);
        write_jsonl(&p, &ps)?;
        stratified.push(json!({"n_steps": n, "rows": ps.len(), "path": p}));
        manifest.outputs.push(p);
    }
    print_json(&json!({"summary": summary, "stratified": stratified}))?;
    manifest.finish(out, started)
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct TrainSettings {
    pub data: Option<PathBuf>,
    pub preset: String,
    pub model: ModelConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl TrainSettings {
    pub(crate) fn preset(name: &str) -> Result<Self> {
        let (model, train) = match name {
            "desk" => (ModelConfig::desk(), TrainConfig::default()),
            "paper" => (ModelConfig::paper(), TrainConfig::paper()),
            _ => return Err(Error::Config(format!("unknown preset `{name}` (desk, paper)"))),
        };
        Ok(TrainSettings { data: None, preset: name.into(), model, train })
    }
}

pub(super) fn train(f: TrainFlags) -> Result<()> {
    let started = Instant::now();
    let ls = layers(f.common.config.as_deref(), &f)?;
    let preset = match lookup(&ls, "preset") {
        Some(Value::String(p)) => p.clone(),
        Some(v) => return Err(Error::Config(format!("preset must be a string, got {v}"))),
        None => "desk".into(),
    };
    let (mut s, mut flat) = settings(&TrainSettings::preset(&preset)?, f.common.config.as_deref(), &f)?;
    if lookup(&ls, "model.d_model").is_some() && lookup(&ls, "model.d_mlp").is_none() {
        s.model.d_mlp = 4 * s.model.d_model;
        flat.insert("model.d_mlp".into(), json!(s.model.d_mlp));
    }
    s.model.validate()?;
    s.train.validate()?;
    let data = required(&s.data, "data")?.to_path_buf();
    let out = &f.common.out;
    create_out(out)?;
    let mut manifest = RunManifest::new("train", flat);
    manifest.add_input(&data)?;

    let paths = DatasetPaths::new(&data);
    let (gen_cfg, _) = read_gen_config(&data)?;
    let train_set = read_problems(&paths.split(Split::Train))?;
    let id = read_problems(&paths.split(Split::TestId))?;
    let ood = read_problems(&paths.split(Split::TestOod))?;
    let init = ModelState::init(&s.model, s.train.seed)?;
    eprintln!(
        "training {} parameters on {} sequences for {} steps",
        s.model.param_count(),
        train_set.len(),
        s.train.total_steps
    );
    let result = train_model(
        init,
        &train_set,
        EvalSets { id: &id, ood: &ood, max_train_steps: gen_cfg.max_train_steps_len },
        &s.train,
        Some(out),
        |r| eprintln!("{}", serde_json::to_string(r).unwrap_or_default()),
    )?;
    let log = out.join("train_log.jsonl");
    manifest.outputs.extend([out.join("best"), out.join("last"), log.clone()]);
    manifest.outputs.extend(export_curves(&[log], out)?);
    print_json(&json!({
        "best_step": result.best_step,
        "best_id_accuracy": result.best_id_accuracy,
        "last": result.log.records.last(),
    }))?;
    manifest.finish(out, started)
}

// ---------------------------------------------------------------- eval

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct EvalSettings {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub splits: Vec<Split>,
    pub vas_steps: Vec<usize>,
    pub min_per_cell: usize,
    pub window: Option<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            checkpoint: None,
            data: None,
            splits: vec![Split::TestId, Split::TestOod],
            vas_steps: Vec::new(),
            min_per_cell: crate::evalsuite::MIN_CELL_COUNT,
            window: None,
        }
    }
}

pub(super) fn eval(f: EvalFlags) -> Result<()> {
    let started = Instant::now();
    let (s, flat) = settings(&EvalSettings::default(), f.common.config.as_deref(), &f)?;
    let ckpt = required(&s.checkpoint, "checkpoint")?;
    let data = required(&s.data, "data")?;
    let out = &f.common.out;
    create_out(out)?;
    let mut manifest = RunManifest::new("eval", flat);
    manifest.add_input(ckpt)?;
    let model = load_checkpoint(ckpt)?;
    let paths = DatasetPaths::new(data);
    let seed = read_gen_config(data).map(|(c, _)| c.seed).unwrap_or(0);

    let mut summary = serde_json::Map::new();
    let mut all = Vec::new();
    for &split in &s.splits {
        let p = paths.split(split);
        manifest.add_input(&p)?;
        let ps = read_problems(&p)?;
        summary.insert(split.as_str().into(), serde_json::to_value(evaluate(&model, &ps, s.window)?)?);
        all.extend(ps);
    }
    let mut artifacts = Vec::new();
    let summary_path = out.join("eval_summary.json");
    write_json(&summary_path, &summary)?;
    manifest.outputs.push(summary_path);
    if !all.is_empty() {
        let prov = Provenance { seed, ..Provenance::of(Some(ckpt), None, seed)? };
        let r = table_by_step(&model, &all, s.window, prov)?;
        print!("{}", report_text(&r));
        let p = out.join("by_step.json");
        write_json(&p, &r)?;
        artifacts.push(p);
    }
    for &n in &s.vas_steps {
        let file = paths.stratified(n);
        manifest.add_input(&file)?;
        let ps = read_problems(&file)?;
        let r = table_by_vas(&model, &ps, n, s.min_per_cell, s.window, Provenance::of(Some(ckpt), Some(&file), seed)?)?;
        print!("{}", report_text(&r));
        let p = out.join(format!("vas_{n}.json"));
        write_json(&p, &r)?;
        artifacts.push(p);
    }
    manifest.outputs.extend(artifacts.iter().cloned());
    manifest.outputs.extend(export_curves(&artifacts, out)?);
    manifest.finish(out, started)
}

// ---------------------------------------------------------------- patch

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub(crate) enum Corrupt {
    FirstOperand,
    FirstOperator,
    OperandChange,
    OperatorFlip,
    ResultFixed,
    ResultVaried,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct PatchSettings {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub split: Split,
    pub n_steps: usize,
    pub n_pairs: usize,
    pub component: Vec<String>,
    pub metric: Metric,
    pub window: String,
    pub corrupt: Corrupt,
    pub corrupt_step: usize,
    pub slot: Option<Slot>,
    pub tracked_step: usize,
    pub combo: Option<OperandCombo>,
    pub combo_step: usize,
    pub order: OrderMode,
    pub only_correct: bool,
    pub seed: u64,
    pub precision: String,
}

impl Default for PatchSettings {
    fn default() -> Self {
        PatchSettings {
            checkpoint: None,
            data: None,
            split: Split::TestId,
            n_steps: 5,
            n_pairs: 100,
            component: vec![Component::ResidPost.as_str().into()],
            metric: Metric::A,
            window: "2x2".into(),
            corrupt: Corrupt::FirstOperand,
            corrupt_step: 0,
            slot: None,
            tracked_step: 1,
            combo: None,
            combo_step: 1,
            order: OrderMode::Forward,
            only_correct: true,
            seed: 0,
            precision: "f64".into(),
        }
    }
}

impl PatchSettings {
    fn components(&self) -> Result<Vec<Component>> {
        if self.component.iter().any(|c| c == "all") {
            return Ok(Component::ALL.to_vec());
        }
        self.component.iter().map(|c| c.parse()).collect()
    }

    fn spec(&self) -> Option<CorruptionSpec> {
        let at = |kind| CorruptionSpec { kind, step: self.corrupt_step, slot: self.slot, tracked_step: None };
        match self.corrupt {
            Corrupt::FirstOperand => Some(CorruptionSpec { slot: self.slot, ..CorruptionSpec::first_operand() }),
            Corrupt::FirstOperator => Some(CorruptionSpec::first_operator()),
            Corrupt::OperandChange => Some(at(CorruptionKind::OperandChange)),
            Corrupt::OperatorFlip => Some(at(CorruptionKind::OperatorFlip)),
            Corrupt::ResultFixed | Corrupt::ResultVaried => None,
        }
    }

    /// Base problems in file order: right length and order, matching the
    /// combination filter, applicable to the corruption, and (optionally)
    /// answered correctly.
    fn base_problems<T: Float>(&self, model: &ModelState<T>, all: Vec<Problem>) -> Result<Vec<Problem>> {
        let mut ps: Vec<Problem> =
            all.into_iter().filter(|p| p.n_steps() == self.n_steps && p.order_mode == self.order).collect();
        if let Some(c) = self.combo {
            ps = filter_combo(&ps, self.combo_step, c);
        }
        let specs: Vec<CorruptionSpec> = match self.spec() {
            Some(s) => vec![s],
            None => [CorruptionKind::ResultFixed, CorruptionKind::ResultVaried]
                .map(|k| CorruptionSpec::result(k, self.tracked_step))
                .to_vec(),
        };
        ps.retain(|p| specs.iter().all(|s| make_pairs(std::slice::from_ref(p), s, self.seed).is_ok()));
        if let Some(first) = ps.first().map(|p| p.order.clone()) {
            ps.retain(|p| p.order == first);
        }
        let mut kept = Vec::new();
        for chunk in ps.chunks(256) {
            if kept.len() >= self.n_pairs {
                break;
            }
            if self.only_correct {
                let ok = outcomes(model, chunk, None)?;
                kept.extend(chunk.iter().zip(ok).filter(|(_, c)| *c).map(|(p, _)| p.clone()));
            } else {
                kept.extend(chunk.iter().cloned());
            }
        }
        kept.truncate(self.n_pairs);
        if kept.is_empty() {
            return Err(Error::Exhausted(format!(
                "no {}-step {} problems fit the patching filters",
                self.n_steps, self.order
            )));
        }
        Ok(kept)
    }
}

fn patch_with<T: Float>(
    model: &ModelState<T>,
    s: &PatchSettings,
    all: Vec<Problem>,
    out: &Path,
    outputs: &mut Vec<PathBuf>,
) -> Result<Value> {
    let window = parse_window(&s.window)?;
    let base = s.base_problems(model, all)?;
    let mut results = Vec::new();
    for component in s.components()? {
        match s.spec() {
            Some(spec) => {
                let pairs = make_pairs(&base, &spec, s.seed)?;
                let grid = run_grid(model, &pairs, component, window, s.metric)?;
                let prompt = pairs[0].clean.token_seq()?;
                let stats = diagonal_stats(&grid, &step_boundaries(prompt.prompt()));
                let stem = format!("grid_{}", component.as_str());
                crate::interpret::write_grid(&grid, out, &stem)?;
                let sp = out.join(format!("{stem}_stats.json"));
                write_json(&sp, &stats)?;
                outputs.extend([out.join(format!("{stem}.json")), out.join(format!("{stem}.svg")), sp]);
                results.push(json!({
                    "component": component, "n": grid.n, "dropped": grid.dropped, "diagonal": stats,
                }));
            }
            None => {
                let fv = compare_fixed_varied(model, &base, s.tracked_step, component, window, s.metric, s.seed)?;
                let p = out.join(format!("fixed_varied_{}.json", component.as_str()));
                write_json(&p, &fv)?;
                outputs.push(p.clone());
                outputs.extend(export_curves(&[p], out)?);
                results.push(json!({
                    "component": component,
                    "region_start": fv.region_start,
                    "fixed_region_mean": fv.fixed_region_mean,
                    "varied_region_mean": fv.varied_region_mean,
                    "fixed_first_step_mean": fv.fixed_first_step_mean,
                    "varied_first_step_mean": fv.varied_first_step_mean,
                }));
            }
        }
    }
    Ok(json!({"n_base_problems": base.len(), "results": results}))
}

pub(super) fn patch(f: PatchFlags) -> Result<()> {
    let started = Instant::now();
    let (s, flat) = settings(&PatchSettings::default(), f.common.config.as_deref(), &f)?;
    let ckpt = required(&s.checkpoint, "checkpoint")?;
    let data = required(&s.data, "data")?;
    parse_window(&s.window)?;
    s.components()?;
    let prec = precision(&s.precision)?;
    let out = &f.common.out;
    create_out(out)?;
    let mut manifest = RunManifest::new("patch", flat);
    manifest.add_input(ckpt)?;
    let file = DatasetPaths::new(data).split(s.split);
    manifest.add_input(&file)?;
    let model = load_checkpoint(ckpt)?;
    let all = read_problems(&file)?;
    let mut outputs = Vec::new();
    let summary = match prec {
        Precision::F32 => patch_with(&model, &s, all, out, &mut outputs)?,
        Precision::F64 => patch_with(&model.cast::<f64>(), &s, all, out, &mut outputs)?,
    };
    let sp = out.join("patch_summary.json");
    write_json(&sp, &summary)?;
    outputs.push(sp);
    print_json(&summary)?;
    manifest.outputs = outputs;
    manifest.finish(out, started)
}

// ---------------------------------------------------------------- sweep

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct SweepSettings {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub split: Split,
    pub sizes: String,
    pub n_steps: Option<usize>,
    pub max_rows: Option<usize>,
    pub precision: String,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            checkpoint: None,
            data: None,
            split: Split::TestId,
            sizes: "1..10".into(),
            n_steps: None,
            max_rows: None,
            precision: "f32".into(),
        }
    }
}

pub(super) fn sweep(f: SweepFlags) -> Result<()> {
    let started = Instant::now();
    let (s, flat) = settings(&SweepSettings::default(), f.common.config.as_deref(), &f)?;
    let ckpt = required(&s.checkpoint, "checkpoint")?;
    let data = required(&s.data, "data")?;
    let sizes = parse_range_list(&s.sizes)?;
    let prec = precision(&s.precision)?;
    let out = &f.common.out;
    create_out(out)?;
    let mut manifest = RunManifest::new("sweep", flat);
    manifest.add_input(ckpt)?;
    let file = DatasetPaths::new(data).split(s.split);
    manifest.add_input(&file)?;
    let model = load_checkpoint(ckpt)?;
    let mut ps = read_problems(&file)?;
    if let Some(n) = s.n_steps {
        ps.retain(|p| p.n_steps() == n);
    }
    if let Some(m) = s.max_rows {
        ps.truncate(m);
    }
    if ps.is_empty() {
        return Err(Error::Exhausted("no problems to sweep".into()));
    }
    let points = match prec {
        Precision::F32 => window_sweep(&model, &ps, &sizes)?,
        Precision::F64 => window_sweep(&model.cast::<f64>(), &ps, &sizes)?,
    };
    let seed = read_gen_config(data).map(|(c, _)| c.seed).unwrap_or(0);
    let curve = SweepCurve { provenance: Provenance::of(Some(ckpt), Some(&file), seed)?, points };
    for p in &curve.points {
        println!("window {:>3}  accuracy {:.4}  n {}", p.window, p.accuracy, p.n);
    }
    let p = out.join("sweep.json");
    write_json(&p, &curve)?;
    manifest.outputs.push(p.clone());
    manifest.outputs.extend(export_curves(&[p], out)?);
    manifest.finish(out, started)
}

// ---------------------------------------------------------------- probe

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub(crate) struct ProbeSettings {
    #[serde(flatten)]
    pub probe: ProbeConfig,
    pub mock: Option<String>,
}

fn mock_style(s: &str) -> Result<MockStyle> {
    match s {
        "correct" => Ok(MockStyle::Correct),
        "wrong" => Ok(MockStyle::Wrong),
        "cot" => Ok(MockStyle::ChainOfThought),
        "unparseable" => Ok(MockStyle::Unparseable),
        _ => Err(Error::Config(format!("unknown mock style `{s}` (correct, wrong, cot, unparseable)"))),
    }
}

pub(super) fn probe(f: ProbeFlags) -> Result<()> {
    let started = Instant::now();
    let (s, flat) = settings(&ProbeSettings::default(), f.common.config.as_deref(), &f)?;
    let mut cfg = s.probe.clone();
    let _server = match s.mock.as_deref() {
        Some(style) => {
            let server = MockServer::start(mock_style(style)?, 0)?;
            cfg.endpoint = server.endpoint();
            cfg.api_key_env = None;
            Some(server)
        }
        None => None,
    };
    let out = &f.common.out;
    create_out(out)?;
    let mut manifest = RunManifest::new("probe", flat);
    let result = run_probe(&cfg, out)?;
    eprintln!("{} records, {} queried this run", result.records.len(), result.queried);
    print!("{}", result.report.to_csv());
    manifest.outputs.extend(["records.jsonl", "report.json", "report.csv", "report.svg"].iter().map(|n| out.join(n)));
    manifest.finish(out, started)
}

// ---------------------------------------------------------------- export

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub(crate) struct ExportSettings {
    pub inputs: Vec<PathBuf>,
}

pub(super) fn export(f: ExportFlags) -> Result<()> {
    let started = Instant::now();
    let (s, flat) = settings(&ExportSettings::default(), f.common.config.as_deref(), &f)?;
    if s.inputs.is_empty() {
        return Err(Error::Config("export needs at least one input".into()));
    }
    let out = &f.common.out;
    create_out(out)?;
    let mut manifest = RunManifest::new("export", flat);
    for i in &s.inputs {
        manifest.add_input(i)?;
    }
    manifest.outputs = export_curves(&s.inputs, out)?;
    for p in &manifest.outputs {
        println!("{}", p.display());
    }
    manifest.finish(out, started)
}
