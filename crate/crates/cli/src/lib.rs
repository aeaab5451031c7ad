//! `fusion4ca <command> --config <path> [--set key=value ...]`
//!
//! Every command writes `config.txt` (the full resolved configuration) and
//! `config.sha256` into `out.dir`. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use fusion4ca_core::checkpoint::{self, Checkpoint};
use fusion4ca_core::config::{content_hash, RunConfig};
use fusion4ca_core::eval::{evaluate, EvalResult, Frame};
use fusion4ca_core::gradcheck::{self, CaseReport};
use fusion4ca_core::params::{Group, ParamStore};
use fusion4ca_core::pipeline::{
    apply_freeze_mask, count_params, forward_infer, plugin_overhead, scene_config, split_seeds, train_loop, CountMode,
    FreezeMode, Model, ModelConfig, Sample, TrainOptions, TrainState,
};
use fusion4ca_core::synth::{encode_ppm, read_scene, write_scene};
use fusion4ca_core::synth::{generate_scene, Scene, CLASS_NAMES};
use fusion4ca_core::viz::{bev_overlay, loss_curves};
use fusion4ca_core::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Generate train and val scenes under data.dir
    Synth,
    /// Train and write loss.csv and checkpoints/
    Train,
    /// Score a checkpoint and write metrics.json
    Eval,
    /// Finite-difference gradient verification
    Gradcheck,
    /// Plugin on/off grid, written to ablation.csv
    Ablate,
    /// Loss curves, BEV overlays and parameter accounting under plots/
    Report,
}

#[derive(Debug, Parser)]
#[command(name = "fusion4ca", version, about = "Camera-LiDAR BEV fusion on synthetic scenes")]
pub struct Cli {
    pub command: Command,
    /// key = value config file; omitted keys take their defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, applied after the file (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// An error attributed to the command stage that raised it.
#[derive(Debug)]
pub struct Failure {
    pub stage: &'static str,
    pub error: Error,
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self.error {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.error)
    }
}

impl std::error::Error for Failure {}

pub type CliResult<T> = Result<T, Failure>;

trait Stage<T> {
    fn at(self, stage: &'static str) -> CliResult<T>;
}

impl<T> Stage<T> for fusion4ca_core::Result<T> {
    fn at(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|error| Failure { stage, error })
    }
}

pub fn main_with_args<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

pub fn load_config(path: Option<&Path>, sets: &[String]) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).at("config")?,
        None => RunConfig::default(),
    };
    for kv in sets {
        cfg.apply_override(kv).at("config")?;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli.config.as_deref(), &cli.set)?;
    write_snapshot(&cfg)?;
    match cli.command {
        Command::Synth => synth(&cfg).map(|n| println!("wrote {n} scenes under {}", cfg.str("data.dir"))),
        Command::Train => train(&cfg).map(|_| ()),
        Command::Eval => eval(&cfg).map(|m| {
            println!(
                "mAP {:.4}  NDS-lite {:.4}  mATE {:.3}  mASE {:.3}  mAOE {:.3}",
                m.map, m.nds_lite, m.mate, m.mase, m.maoe
            )
        }),
        Command::Gradcheck => {
            let reports = gradcheck(&cfg)?;
            match reports.iter().find(|r| !r.passed()) {
                Some(r) => Err(Failure {
                    stage: "gradcheck",
                    error: Error::Degenerate(format!(
                        "{} max relative error {:e} exceeds {:e}",
                        r.name,
                        r.max_rel_error,
                        gradcheck::TOLERANCE
                    )),
                }),
                None => Ok(()),
            }
        }
        Command::Ablate => ablate(&cfg).map(|_| ()),
        Command::Report => report(&cfg),
    }
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    PathBuf::from(cfg.str("out.dir"))
}

fn write_file(path: &Path, bytes: &[u8], stage: &'static str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)).at(stage)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e)).at(stage)
}

pub fn write_snapshot(cfg: &RunConfig) -> CliResult<()> {
    let out = out_dir(cfg);
    write_file(&out.join("config.txt"), cfg.snapshot().as_bytes(), "config")?;
    write_file(
        &out.join("config.sha256"),
        format!("{}\n", cfg.hash()).as_bytes(),
        "config",
    )
}

fn split_dir(cfg: &RunConfig, split: &str) -> PathBuf {
    Path::new(cfg.str("data.dir")).join(split)
}

/// Generates both splits; returns the number of scenes written.
pub fn synth(cfg: &RunConfig) -> CliResult<usize> {
    let mut n = 0;
    for split in ["train", "val"] {
        let root = split_dir(cfg, split);
        for seed in split_seeds(cfg, split).at("synth")? {
            let scene = generate_scene(&scene_config(cfg, seed).at("synth")?).at("synth")?;
            write_scene(&scene, &root).at("synth")?;
            n += 1;
        }
    }
    Ok(n)
}

/// Reads the scenes of `split` in seed order.
pub fn load_split(cfg: &RunConfig, split: &str) -> CliResult<Vec<Scene>> {
    let root = split_dir(cfg, split);
    split_seeds(cfg, split)
        .at("data")?
        .into_iter()
        .map(|seed| {
            let dir = root.join(format!("scene_{seed:08}"));
            if !dir.exists() {
                return Err(Failure {
                    stage: "data",
                    error: Error::Config(format!("missing scene {} (run `fusion4ca synth` first)", dir.display())),
                });
            }
            read_scene(&dir).at("data")
        })
        .collect()
}

pub fn prepare(scenes: &[Scene], mc: &ModelConfig) -> CliResult<Vec<Sample>> {
    scenes.iter().map(|s| Sample::new(s, mc).at("data")).collect()
}

pub const LOSS_HEADER: &str = "step,L_det,L_align,L_aux,total";

/// Trains a model per `cfg` on already prepared samples, returning the
/// loss log (CSV text), parameters and final state. `checkpoint` is called
/// at every `train.checkpoint_every` boundary.
pub fn train_on(
    cfg: &RunConfig,
    samples: &[Sample],
    mut checkpoint: impl FnMut(&ParamStore<f32>, &TrainState) -> fusion4ca_core::Result<()>,
) -> CliResult<(Model, ParamStore<f32>, TrainState, String)> {
    let mc = ModelConfig::from_run(cfg).at("train")?;
    let (model, mut store) = Model::new::<f32>(&mc).at("train")?;
    let init = cfg.str("train.init");
    if !init.is_empty() {
        let ck = checkpoint::load(Path::new(init)).at("train")?;
        checkpoint::warm_start(&ck.store, &mut store);
    }
    apply_freeze_mask(&mut store, FreezeMode::parse(cfg.str("freeze.mode")).at("train")?);
    let opts = TrainOptions::from_run(cfg).at("train")?;
    let every = cfg.u64("train.checkpoint_every").at("train")?;
    let mut state = TrainState::new(cfg.u64("train.seed").at("train")?, store.len());
    let mut log = format!("{LOSS_HEADER}\n");
    train_loop(
        &model,
        &mut store,
        &mut state,
        samples,
        &opts,
        |step, r, store, state| {
            let l = r.losses;
            log.push_str(&format!("{step},{},{},{},{}\n", l.det, l.align, l.aux, l.total));
            if every > 0 && state.step % every == 0 && state.step < opts.total_steps {
                checkpoint(store, state)?;
            }
            Ok(())
        },
    )
    .at("train")?;
    Ok((model, store, state, log))
}

pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    match cfg.str("eval.checkpoint") {
        "" => out_dir(cfg).join("checkpoints").join("final.ckpt"),
        p => PathBuf::from(p),
    }
}

/// `train`: writes `loss.csv` and `checkpoints/final.ckpt` (plus periodic
/// `checkpoints/step_<n>.ckpt`). Returns the final checkpoint path.
pub fn train(cfg: &RunConfig) -> CliResult<PathBuf> {
    let mc = ModelConfig::from_run(cfg).at("train")?;
    let samples = prepare(&load_split(cfg, "train")?, &mc)?;
    let ck_dir = out_dir(cfg).join("checkpoints");
    let snapshot = cfg.snapshot();
    let save = |store: &ParamStore<f32>, state: &TrainState, path: &Path| {
        let ck = Checkpoint {
            config: snapshot.clone(),
            store: store.clone(),
            state: state.clone(),
        };
        checkpoint::save(path, &ck)
    };
    let (_, store, state, log) = train_on(cfg, &samples, |store, state| {
        save(store, state, &ck_dir.join(format!("step_{:06}.ckpt", state.step)))
    })?;
    write_file(&out_dir(cfg).join("loss.csv"), log.as_bytes(), "train")?;
    let last = ck_dir.join("final.ckpt");
    save(&store, &state, &last).at("checkpoint")?;
    eprintln!(
        "trained {} steps; running average loss {:.4} (L_det {:.4}, L_align {:.4}, L_aux {:.4})",
        state.step, state.average.total, state.average.det, state.average.align, state.average.aux
    );
    Ok(last)
}

/// Rebuilds the model recorded in a checkpoint and loads its parameters.
pub fn load_model(path: &Path) -> CliResult<(Model, ParamStore<f32>, RunConfig, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e)).at("checkpoint")?;
    let ck = checkpoint::decode(path, &bytes).at("checkpoint")?;
    let ck_cfg = RunConfig::parse(&ck.config).at("checkpoint")?;
    let mc = ModelConfig::from_run(&ck_cfg).at("checkpoint")?;
    let (model, mut store) = Model::new::<f32>(&mc).at("checkpoint")?;
    checkpoint::restore_into(path, &ck.store, &mut store).at("checkpoint")?;
    Ok((model, store, ck_cfg, bytes))
}

pub fn score(model: &Model, store: &ParamStore<f32>, samples: &[Sample]) -> CliResult<EvalResult> {
    let frames = samples
        .iter()
        .map(|s| {
            Ok(Frame {
                preds: forward_infer(model, store, s).at("eval")?,
                gts: s.boxes.clone(),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(evaluate(&frames, &CLASS_NAMES))
}

/// `eval`: scores the checkpoint on `eval.split`, writing `metrics.json`.
pub fn eval(cfg: &RunConfig) -> CliResult<EvalResult> {
    let path = checkpoint_path(cfg);
    let (model, store, _, bytes) = load_model(&path)?;
    let split = cfg.str("eval.split");
    let samples = prepare(&load_split(cfg, split)?, &model.config)?;
    let metrics = score(&model, &store, &samples)?;
    let mut json = serde_json::to_value(&metrics).expect("metrics serialize");
    let obj = json.as_object_mut().expect("object");
    obj.insert("config_hash".into(), cfg.hash().into());
    obj.insert("checkpoint_hash".into(), content_hash(&bytes).into());
    obj.insert("checkpoint".into(), path.display().to_string().into());
    obj.insert("split".into(), split.into());
    obj.insert("scenes".into(), samples.len().into());
    let text = serde_json::to_string_pretty(&json).expect("json");
    write_file(
        &out_dir(cfg).join("metrics.json"),
        format!("{text}\n").as_bytes(),
        "eval",
    )?;
    Ok(metrics)
}

/// `gradcheck`: prints and writes `gradcheck.csv` (module, max relative
/// error, elements checked, pass).
pub fn gradcheck(cfg: &RunConfig) -> CliResult<Vec<CaseReport>> {
    let reports = gradcheck::run(cfg.u64("model.seed").at("gradcheck")?).at("gradcheck")?;
    let mut csv = String::from("module,max_rel_error,checked,pass\n");
    println!("{:<16} {:>14} {:>8}  result", "module", "max rel err", "checked");
    for r in &reports {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        println!("{:<16} {:>14.3e} {:>8}  {verdict}", r.name, r.max_rel_error, r.checked);
        csv.push_str(&format!(
            "{},{:e},{},{}\n",
            r.name,
            r.max_rel_error,
            r.checked,
            r.passed()
        ));
    }
    write_file(&out_dir(cfg).join("gradcheck.csv"), csv.as_bytes(), "gradcheck")?;
    Ok(reports)
}

pub const ABLATION_KEYS: [&str; 4] = [
    "align.enabled",
    "auxbranch.enabled",
    "coordatt.enabled",
    "adapter.enabled",
];

/// Rows as on/off flags over [`ABLATION_KEYS`]: either comma-separated
/// 4-digit bit strings or `grid:<k>` for every combination of the first `k`
/// components (the rest off).
pub fn ablation_rows(spec: &str) -> fusion4ca_core::Result<Vec<[bool; 4]>> {
    let bad = || Error::Config(format!("ablate.rows: cannot parse {spec:?}"));
    if let Some(k) = spec.trim().strip_prefix("grid:") {
        let k: usize = k.trim().parse().map_err(|_| bad())?;
        if !(1..=4).contains(&k) {
            return Err(bad());
        }
        return Ok((0..1usize << k)
            .map(|m| std::array::from_fn(|i| i < k && m >> (k - 1 - i) & 1 == 1))
            .collect());
    }
    let rows: Vec<[bool; 4]> = spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let b = s.as_bytes();
            if b.len() != 4 || !b.iter().all(|c| *c == b'0' || *c == b'1') {
                return Err(bad());
            }
            Ok(std::array::from_fn(|i| b[i] == b'1'))
        })
        .collect::<fusion4ca_core::Result<_>>()?;
    if rows.is_empty() {
        return Err(bad());
    }
    Ok(rows)
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub flags: [bool; 4],
    pub map: Vec<f64>,
    pub nds: Vec<f64>,
    pub inference_params: usize,
    pub training_params: usize,
}

pub const ABLATION_HEADER: &str =
    "row,align,auxbranch,coordatt,adapter,mAP,nds_lite,mAP_per_seed,nds_lite_per_seed,inference_params,training_params";

/// `ablate`: trains every row for every seed in `ablate.seeds` (used as both
/// `model.seed` and `train.seed`) and scores it on the val split. Writes
/// `ablation.csv` with medians over seeds.
pub fn ablate(cfg: &RunConfig) -> CliResult<Vec<AblationRow>> {
    let rows = ablation_rows(cfg.str("ablate.rows")).at("ablate")?;
    let seeds: Vec<u64> = cfg.list("ablate.seeds").at("ablate")?;
    if seeds.is_empty() {
        return Err(Failure {
            stage: "ablate",
            error: Error::Config("ablate.seeds is empty".into()),
        });
    }
    // Toggles do not affect sample preparation, so samples are shared.
    let mc = ModelConfig::from_run(cfg).at("ablate")?;
    let train_samples = prepare(&load_split(cfg, "train")?, &mc)?;
    let val_samples = prepare(&load_split(cfg, "val")?, &mc)?;
    let mut out = Vec::new();
    let mut csv = format!("{ABLATION_HEADER}\n");
    for (i, flags) in rows.iter().enumerate() {
        let mut row = AblationRow {
            flags: *flags,
            map: Vec::new(),
            nds: Vec::new(),
            inference_params: 0,
            training_params: 0,
        };
        for &seed in &seeds {
            let mut c = cfg.clone();
            for (k, on) in ABLATION_KEYS.iter().zip(flags) {
                c.set(k, if *on { "true" } else { "false" }).at("ablate")?;
            }
            c.set("model.seed", &seed.to_string()).at("ablate")?;
            c.set("train.seed", &seed.to_string()).at("ablate")?;
            let (model, store, _, _) = train_on(&c, &train_samples, |_, _| Ok(()))?;
            let m = score(&model, &store, &val_samples)?;
            row.inference_params = count_params(&store, CountMode::Inference);
            row.training_params = count_params(&store, CountMode::Training);
            eprintln!(
                "row {} {} seed {seed}: mAP {:.4} NDS-lite {:.4}",
                i + 1,
                bits(flags),
                m.map,
                m.nds_lite
            );
            row.map.push(m.map);
            row.nds.push(m.nds_lite);
        }
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(";");
        csv.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{},{},{},{}\n",
            i + 1,
            flags[0] as u8,
            flags[1] as u8,
            flags[2] as u8,
            flags[3] as u8,
            median(&row.map),
            median(&row.nds),
            join(&row.map),
            join(&row.nds),
            row.inference_params,
            row.training_params
        ));
        out.push(row);
    }
    write_file(&out_dir(cfg).join("ablation.csv"), csv.as_bytes(), "ablate")?;
    print!("{csv}");
    Ok(out)
}

fn bits(flags: &[bool; 4]) -> String {
    flags.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// Parses a `loss.csv` written by `train`.
pub fn read_loss_csv(path: &Path) -> CliResult<(Vec<u64>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e)).at("report")?;
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_HEADER) {
        return Err(Error::corrupt(path, "missing loss.csv header")).at("report");
    }
    let mut steps = Vec::new();
    let mut cols = vec![Vec::new(); 4];
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let parsed = (f.len() == 5)
            .then(|| {
                let step = f[0].parse().ok()?;
                let vals: Option<Vec<f64>> = f[1..].iter().map(|v| v.parse().ok()).collect();
                Some((step, vals?))
            })
            .flatten();
        let (step, vals) = parsed
            .ok_or_else(|| Error::corrupt(path, format!("bad row {line:?}")))
            .at("report")?;
        steps.push(step);
        for (c, v) in cols.iter_mut().zip(vals) {
            c.push(v);
        }
    }
    Ok((steps, cols))
}

/// Parameter accounting per group, plus the adapter + coordinate-attention
/// share of inference parameters.
pub fn param_report(store: &ParamStore<f32>) -> String {
    let mut s = String::from("group,params,inference\n");
    for g in Group::ALL {
        s.push_str(&format!("{},{},{}\n", g.name(), store.group_size(g), g.inference()));
    }
    s.push_str(&format!(
        "total_inference,{}\ntotal_training,{}\nplugin_overhead,{:.6}\n",
        count_params(store, CountMode::Inference),
        count_params(store, CountMode::Training),
        plugin_overhead(store)
    ));
    s
}

/// `report`: `plots/loss.ppm` from `loss.csv`, `plots/bev_<scene>.ppm` for
/// the first `report.scenes` scenes of `eval.split`, and `params.csv`.
pub fn report(cfg: &RunConfig) -> CliResult<()> {
    let out = out_dir(cfg);
    let plots = out.join("plots");
    let (steps, cols) = read_loss_csv(&out.join("loss.csv"))?;
    write_file(
        &plots.join("loss.ppm"),
        &encode_ppm(&loss_curves(&steps, &cols, 800, 400)),
        "report",
    )?;
    let (model, store, _, _) = load_model(&checkpoint_path(cfg))?;
    let params = param_report(&store);
    write_file(&out.join("params.csv"), params.as_bytes(), "report")?;
    print!("{params}");
    let split = cfg.str("eval.split");
    let n = cfg.usize("report.scenes").at("report")?;
    for scene in load_split(cfg, split)?.into_iter().take(n) {
        let sample = Sample::new(&scene, &model.config).at("report")?;
        let preds = forward_infer(&model, &store, &sample).at("report")?;
        let img = bev_overlay(&model.config.grid, &scene.cloud, &scene.boxes, &preds, 32.0);
        write_file(
            &plots.join(format!("bev_{}.ppm", scene.scene_id)),
            &encode_ppm(&img),
            "report",
        )?;
    }
    println!("plots written to {}", plots.display());
    Ok(())
}
