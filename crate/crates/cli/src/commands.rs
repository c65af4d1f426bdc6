use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Map, Value};

use pflow::contours::{
    cookbook_check as audit, evaluate_data, manifold_corrected_logpdf, similarity_matrix, trace_principal_manifold, ContourReport, Partition,
};
use pflow::data::{self, fmt_f64, Dataset};
use pflow::flows::{ArchSpec, CouplingKind, NetSpec};
use pflow::objectives::{Estimator, ObjectiveKind};
use pflow::train::{fit, fit_injective, metrics_csv, Checkpoint, InjectiveConfig, OptimizerConfig, TrainConfig};
use pflow::{FlowStack, Tensor};

use crate::args::*;
use crate::record::{fail, file_manifest, hash_json, resolve_out, Category, Run};

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

fn x_cols(prefix: &str, d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("{prefix}{i}")).collect()
}

fn json_bytes(v: &impl Serialize) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

fn load_ckpt(p: &Path) -> Result<Checkpoint> {
    let file = if p.is_dir() { p.join("model.ckpt") } else { p.to_path_buf() };
    if !file.is_file() {
        return Err(fail(Category::Input, format!("missing checkpoint `{}`", file.display())));
    }
    Checkpoint::load(&file).with_context(|| format!("reading checkpoint `{}`", file.display()))
}

fn load_stack(p: &Path) -> Result<FlowStack> {
    Ok(load_ckpt(p)?.stack()?)
}

/// A data file, or a gen-data directory: its test split when `held_out`,
/// else its train split.
fn load_data(p: &Path, held_out: bool) -> Result<Dataset> {
    if !p.exists() {
        return Err(fail(Category::Input, format!("missing data `{}`", p.display())));
    }
    let file = if p.is_dir() && held_out && p.join("test.csv").is_file() { p.join("test.csv") } else { p.to_path_buf() };
    data::read(&file).with_context(|| format!("reading data `{}`", file.display()))
}

fn limited(ds: &Dataset, limit: Option<usize>) -> Tensor {
    let n = limit.unwrap_or(ds.len()).min(ds.len());
    ds.points.slice_rows(0, n)
}

fn partition_of(arg: &PartitionArg, dim: usize) -> Result<Partition> {
    match &arg.partition {
        None => Ok(Partition::singletons(dim)),
        Some(s) => {
            let blocks: Vec<Vec<usize>> = serde_json::from_str(s).with_context(|| format!("partition `{s}` is not a JSON list of index lists"))?;
            Ok(Partition::new(blocks, dim)?)
        }
    }
}

fn check_dim(stack: &FlowStack, x: &Tensor) -> Result<()> {
    if x.cols() != stack.data_dim() {
        return Err(fail(Category::Input, format!("data has {} columns, checkpoint expects {}", x.cols(), stack.data_dim())));
    }
    Ok(())
}

pub fn gen_data(a: &GenDataArgs, argv: &[String]) -> Result<()> {
    let ds = if a.name == data::VARDIM {
        data::gen_vardim_3d(a.n, a.seed, a.noise)?
    } else {
        if a.noise != 0.0 {
            return Err(fail(Category::Config, "--noise applies to vardim only; 2D generators use their built-in noise"));
        }
        data::gen_2d(&a.name, a.n, a.seed)?
    };
    let out = resolve_out(&a.out);
    let mut run = Run::new("gen-data", argv, a, Some(a.seed))?;
    match a.train_frac {
        Some(frac) => {
            let m = data::split_and_write(&ds, frac, &out)?;
            for f in &m.files {
                run.notes.push(format!("wrote {}", out.join(f).display()));
            }
            println!("{}: {} train / {} test rows in {}", ds.name, m.n_train, m.n_test, out.display());
            run.finish(&out.join("run.json"))
        }
        None => {
            run.write(&out, &data::to_csv(&ds)?)?;
            println!("{}: {} rows to {}", ds.name, ds.len(), out.display());
            run.finish(&file_manifest(&out))
        }
    }
}

fn objective_name(o: ObjectiveArg) -> Value {
    let k = match o {
        ObjectiveArg::Ml => ObjectiveKind::Ml,
        ObjectiveArg::PfLagrangian => ObjectiveKind::PfLagrangian,
        ObjectiveArg::Pf => ObjectiveKind::Pf,
        ObjectiveArg::Ipf => ObjectiveKind::Ipf,
        ObjectiveArg::IpfStage1 => ObjectiveKind::IpfStage1,
        ObjectiveArg::IpfStage2 => ObjectiveKind::IpfStage2,
    };
    serde_json::to_value(k).expect("kind serializes")
}

fn coupling_kind(c: CouplingArg) -> CouplingKind {
    match c {
        CouplingArg::Affine => CouplingKind::Affine,
        CouplingArg::RqSpline => CouplingKind::RqSpline,
        CouplingArg::MixtureCdf => CouplingKind::MixtureCdf,
    }
}

/// Flag overrides shared by plain and two-stage configs.
fn apply_common(cfg: &mut Map<String, Value>, a: &TrainArgs) {
    let mut set = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            cfg.insert(k.into(), v);
        }
    };
    set("batch_size", a.batch_size.map(Value::from));
    set("epochs", a.epochs.map(Value::from));
    set("steps", a.steps.map(Value::from));
    set("eval_interval", a.eval_interval.map(Value::from));
    set("eval_points", a.eval_points.map(Value::from));
    set("seed", a.seed.map(Value::from));
    set("schedule", a.cosine_floor.map(|f| json!({ "kind": "COSINE", "floor": f })));
    if let Some(o) = a.optimizer {
        let oc = match o {
            OptimizerArg::Adabelief => OptimizerConfig::adabelief(),
            OptimizerArg::Adam => OptimizerConfig::adam(),
            OptimizerArg::Sgd => OptimizerConfig::sgd(),
        };
        cfg.insert("optimizer".into(), serde_json::to_value(oc).expect("optimizer serializes"));
    }
}

fn apply_objective(cfg: &mut Map<String, Value>, a: &TrainArgs) -> Result<()> {
    let obj = cfg.entry("objective").or_insert_with(|| json!({ "kind": "ML" }));
    let obj = obj.as_object_mut().ok_or_else(|| fail(Category::Config, "`objective` must be an object"))?;
    if let Some(k) = a.objective {
        obj.insert("kind".into(), objective_name(k));
    }
    if let Some(v) = a.alpha {
        obj.insert("alpha".into(), v.into());
    }
    if let Some(v) = a.gamma {
        obj.insert("gamma".into(), v.into());
    }
    if let Some(e) = a.estimator {
        let e = match e {
            EstimatorArg::Exact => Estimator::Exact,
            EstimatorArg::UnbiasedSingleBlock => Estimator::UnbiasedSingleBlock,
        };
        obj.insert("estimator".into(), serde_json::to_value(e)?);
    }
    Ok(())
}

enum Plan {
    Plain(TrainConfig),
    Injective(InjectiveConfig),
}

fn plan(a: &TrainArgs, dim: usize) -> Result<Plan> {
    let mut root: Map<String, Value> = match &a.config {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| fail(Category::Input, format!("cannot read config `{}`: {e}", p.display())))?;
            match serde_json::from_slice(&bytes) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(fail(Category::Config, "config must be a JSON object")),
                Err(e) => return Err(fail(Category::Config, format!("malformed config `{}`: {e}", p.display()))),
            }
        }
        None => Map::new(),
    };
    let net = NetSpec { hidden: a.hidden, blocks: a.res_blocks };
    let kind = coupling_kind(a.coupling);
    let latent = a.latent_dim.unwrap_or(dim);
    if latent == 0 || latent > dim {
        return Err(fail(Category::Config, format!("latent dim {latent} must lie in 1..={dim}")));
    }
    let two_stage = root.contains_key("stage1") || root.contains_key("stage2") || (latent < dim && !root.contains_key("arch"));
    if two_stage {
        if a.objective.is_some() || a.alpha.is_some() || a.lr.is_some() {
            return Err(fail(Category::Config, "--objective, --alpha and --lr do not apply to two-stage injective training; set them per stage in the config"));
        }
        let seed = a.seed.or_else(|| root.get("seed").and_then(Value::as_u64)).unwrap_or(0);
        let base = InjectiveConfig::new(ArchSpec::injective(latent, dim, a.couplings, a.ambient_couplings, kind, net), seed);
        let mut val = serde_json::to_value(&base)?;
        for stage in ["stage1", "stage2"] {
            let slot = val[stage].as_object_mut().expect("stage object");
            if let Some(Value::Object(user)) = root.remove(stage) {
                slot.extend(user);
            }
            apply_common(slot, a);
            if let Some(g) = a.gamma {
                slot["objective"]["gamma"] = g.into();
            }
        }
        return Ok(Plan::Injective(serde_json::from_value(val).map_err(|e| fail(Category::Config, format!("malformed config: {e}")))?));
    }
    if !root.contains_key("arch") {
        let arch = ArchSpec::coupling(dim, a.couplings, kind, net);
        root.insert("arch".into(), serde_json::to_value(arch)?);
    }
    apply_objective(&mut root, a)?;
    apply_common(&mut root, a);
    if let Some(lr) = a.lr {
        root.insert("lr".into(), lr.into());
    }
    let cfg: TrainConfig = serde_json::from_value(Value::Object(root)).map_err(|e| fail(Category::Config, format!("malformed config: {e}")))?;
    cfg.validate()?;
    if cfg.arch.data_dim != dim {
        return Err(fail(Category::Config, format!("architecture expects {} data columns, data has {dim}", cfg.arch.data_dim)));
    }
    Ok(Plan::Plain(cfg))
}

pub fn train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let ds = load_data(&a.data, false)?;
    let (tr, te) = match &a.test {
        Some(t) => (ds.points.clone(), load_data(t, true)?.points),
        None if a.data.is_dir() && a.data.join("test.csv").is_file() => (ds.points.clone(), load_data(&a.data, true)?.points),
        None => {
            if !(a.holdout_frac > 0.0 && a.holdout_frac < 1.0) {
                return Err(fail(Category::Config, "--holdout-frac must lie strictly between 0 and 1"));
            }
            let (t, h) = ds.split(1.0 - a.holdout_frac)?;
            if t.is_empty() || h.is_empty() {
                return Err(fail(Category::Input, "too few rows to hold out a test set"));
            }
            (t.points, h.points)
        }
    };
    if tr.cols() != te.cols() {
        return Err(fail(Category::Input, "training and held-out data differ in dimension"));
    }
    let out = resolve_out(&a.out);
    std::fs::create_dir_all(&out)?;
    match plan(a, tr.cols())? {
        Plan::Plain(cfg) => {
            let mut run = Run::new("train", argv, &cfg, Some(cfg.seed))?.with_hash(cfg.hash());
            run.write(&out.join("config.json"), &json_bytes(&cfg)?)?;
            let ck = match fit(&cfg, &tr, &te) {
                Ok(ck) => ck,
                Err(pflow::Error::Diverged { step, last_good }) => {
                    run.write(&out.join("model.ckpt"), &last_good.to_bytes()?)?;
                    run.write(&out.join("metrics.csv"), &metrics_csv(&last_good.history)?)?;
                    run.notes.push(format!("diverged at step {step}; model.ckpt holds step {}", last_good.step));
                    run.finish(&out.join("run.json"))?;
                    return Err(fail(Category::Numerical, format!("training diverged at step {step}; last good checkpoint (step {}) saved", last_good.step)));
                }
                Err(e) => return Err(e.into()),
            };
            run.write(&out.join("model.ckpt"), &ck.to_bytes()?)?;
            run.write(&out.join("metrics.csv"), &metrics_csv(&ck.history)?)?;
            if let Some(r) = ck.history.last() {
                println!("step {}: held-out nll {:.6} nats, I_P {:.6}", r.step, r.nll, r.i_p);
            }
            run.finish(&out.join("run.json"))
        }
        Plan::Injective(cfg) => {
            let mut run = Run::new("train", argv, &cfg, Some(cfg.stage1.seed))?;
            run.write(&out.join("config.json"), &json_bytes(&cfg)?)?;
            let fitted = fit_injective(&cfg, &tr, &te)?;
            run.write(&out.join("stage1.ckpt"), &fitted.stage1.to_bytes()?)?;
            run.write(&out.join("metrics_stage1.csv"), &metrics_csv(&fitted.stage1.history)?)?;
            run.write(&out.join("model.ckpt"), &fitted.stage2.to_bytes()?)?;
            run.write(&out.join("metrics.csv"), &metrics_csv(&fitted.stage2.history)?)?;
            let mse = pflow::train::reconstruction_mse(&fitted.stage2.stack()?, &te)?;
            run.notes.push(format!("held-out reconstruction mse {}", fmt_f64(mse)));
            println!("two-stage fit done: held-out reconstruction mse {mse:.3e}");
            run.finish(&out.join("run.json"))
        }
    }
}

pub fn eval(a: &EvalArgs, argv: &[String]) -> Result<()> {
    let stack = load_stack(&a.ckpt.ckpt)?;
    let ds = load_data(&a.data, true)?;
    let x = limited(&ds, a.limit);
    check_dim(&stack, &x)?;
    let p = partition_of(&a.partition, stack.latent_dim())?;
    let pts = evaluate_data(&stack, &x)?;
    let square = !stack.is_injective();
    let mut header = x_cols("x", x.cols());
    header.extend(["logpx", "I_P", "Ihat_P"].map(String::from));
    if ds.true_logpdf.is_some() {
        header.push("true_logpdf".into());
    }
    let (mut nll, mut ip, mut ihat) = (0.0, 0.0, 0.0);
    let mut rows = Vec::with_capacity(pts.len());
    for (r, pt) in pts.iter().enumerate() {
        let i = pt.partition_pmi(&p)?;
        let h = if square { Some(pt.partition_pmi_hat(&p)?) } else { None };
        nll -= pt.logpx;
        ip += i;
        ihat += h.unwrap_or(0.0);
        let mut row: Vec<String> = x.row(r).iter().map(|&v| fmt_f64(v)).collect();
        row.extend([fmt_f64(pt.logpx), fmt_f64(i), h.map(fmt_f64).unwrap_or_default()]);
        if let Some(t) = &ds.true_logpdf {
            row.push(fmt_f64(t[r]));
        }
        rows.push(row);
    }
    let n = pts.len() as f64;
    let summary = json!({ "n": pts.len(), "nll": nll / n, "I_P": ip / n, "Ihat_P": if square { Some(ihat / n) } else { None } });
    let out = resolve_out(&a.out);
    let mut run = Run::new("eval", argv, a, None)?;
    run.write(&out.join("eval.json"), &json_bytes(&summary)?)?;
    run.write(&out.join("points.csv"), &csv_bytes(&header, rows))?;
    println!("{}", serde_json::to_string(&summary)?);
    run.finish(&out.join("run.json"))
}

pub fn sample(a: &SampleArgs, argv: &[String]) -> Result<()> {
    let stack = load_stack(&a.ckpt.ckpt)?;
    let (z, x) = stack.sample_with_latent(a.n, a.seed)?;
    let mut header = x_cols("z", z.cols());
    header.extend(x_cols("x", x.cols()));
    let rows = (0..a.n).map(|r| z.row(r).iter().chain(x.row(r)).map(|&v| fmt_f64(v)).collect());
    let out = resolve_out(&a.out);
    let mut run = Run::new("sample", argv, a, Some(a.seed))?;
    run.write(&out, &csv_bytes(&header, rows))?;
    println!("{} samples to {}", a.n, out.display());
    run.finish(&file_manifest(&out))
}

#[derive(Serialize)]
struct PointReport {
    x: Vec<f64>,
    #[serde(flatten)]
    report: ContourReport,
}

pub fn report_contours(a: &ReportArgs, argv: &[String]) -> Result<()> {
    let stack = load_stack(&a.ckpt.ckpt)?;
    let ds = load_data(&a.data, true)?;
    let x = limited(&ds, Some(a.limit));
    check_dim(&stack, &x)?;
    let p = partition_of(&a.partition, stack.latent_dim())?;
    let pts = evaluate_data(&stack, &x)?;
    let points = pts.iter().enumerate().map(|(r, pt)| Ok(PointReport { x: x.row(r).to_vec(), report: pt.report(&p)? })).collect::<Result<Vec<_>>>()?;
    let doc = json!({ "partition": p.blocks(), "points": points });
    let out = resolve_out(&a.out);
    let mut run = Run::new("report-contours", argv, a, None)?;
    run.write(&out, &json_bytes(&doc)?)?;
    println!("{} contour reports to {}", points.len(), out.display());
    run.finish(&file_manifest(&out))
}

pub fn trace(a: &TraceArgs, argv: &[String]) -> Result<()> {
    let stack = load_stack(&a.ckpt.ckpt)?;
    let starts: Vec<Vec<f64>> = match (&a.start, &a.data) {
        (Some(s), _) => {
            let v: std::result::Result<Vec<f64>, _> = s.split(',').map(|c| c.trim().parse::<f64>()).collect();
            vec![v.map_err(|e| fail(Category::Config, format!("--start `{s}`: {e}")))?]
        }
        (None, Some(d)) => {
            let ds = load_data(d, true)?;
            let x = limited(&ds, Some(a.n_starts));
            (0..x.rows()).map(|r| x.row(r).to_vec()).collect()
        }
        (None, None) => return Err(fail(Category::Config, "trace needs --start or --data")),
    };
    if starts.iter().any(|s| s.len() != stack.data_dim()) {
        return Err(fail(Category::Input, format!("starting points need {} coordinates", stack.data_dim())));
    }
    let blocks: Vec<usize> = match a.block {
        Some(b) => vec![b],
        None => (0..stack.latent_dim()).collect(),
    };
    let mut header = ["path", "block", "step", "t"].map(String::from).to_vec();
    header.extend(x_cols("x", stack.data_dim()));
    header.extend(x_cols("z", stack.latent_dim()));
    header.push("cos".into());
    let out = resolve_out(&a.out);
    let mut run = Run::new("trace", argv, a, None)?;
    let mut rows = Vec::new();
    let mut path = 0usize;
    for s in &starts {
        for &b in &blocks {
            let tp = trace_principal_manifold(&stack, s, &[b], a.t_max, a.step)?;
            if let Some(why) = &tp.truncated {
                run.notes.push(format!("path {path} (block {b}) truncated: {why}"));
            }
            for (i, pt) in tp.points.iter().enumerate() {
                let mut row = vec![path.to_string(), b.to_string(), i.to_string(), fmt_f64(pt.t)];
                row.extend(pt.x.iter().chain(&pt.z).map(|&v| fmt_f64(v)));
                row.push(fmt_f64(pt.cos));
                rows.push(row);
            }
            path += 1;
        }
    }
    run.write(&out, &csv_bytes(&header, rows))?;
    println!("{path} paths to {}", out.display());
    run.finish(&file_manifest(&out))
}

pub fn similarity(a: &SimilarityArgs, argv: &[String]) -> Result<()> {
    let stack = load_stack(&a.ckpt.ckpt)?;
    let ds = load_data(&a.data, true)?;
    let x = limited(&ds, Some(a.limit));
    check_dim(&stack, &x)?;
    let p = partition_of(&a.partition, stack.latent_dim())?;
    let m = similarity_matrix(&stack, &x, &p)?;
    let matrix: Vec<Vec<f64>> = (0..m.rows()).map(|r| m.row(r).to_vec()).collect();
    let doc = json!({
        "row_labels": (1..=m.rows()).map(|i| format!("contour {i} by increasing stretch")).collect::<Vec<_>>(),
        "col_labels": (1..=m.cols()).map(|i| format!("PC {i} by increasing eigenvalue")).collect::<Vec<_>>(),
        "matrix": matrix,
        "n_points": x.rows(),
    });
    let out = resolve_out(&a.out);
    let mut run = Run::new("similarity", argv, a, None)?;
    run.write(&out, &json_bytes(&doc)?)?;
    println!("{}x{} similarity matrix to {}", m.rows(), m.cols(), out.display());
    run.finish(&file_manifest(&out))
}

pub fn manifold_density(a: &ManifoldArgs, argv: &[String]) -> Result<()> {
    let stack = load_stack(&a.ckpt.ckpt)?;
    let ds = load_data(&a.data, true)?;
    let x = limited(&ds, a.limit);
    check_dim(&stack, &x)?;
    let p = partition_of(&a.partition, stack.latent_dim())?;
    let md = manifold_corrected_logpdf(&stack, &x, &p, a.epsilon)?;
    let mut header = x_cols("x", x.cols());
    header.extend(["log_pM", "predicted_rank"].map(String::from));
    if ds.true_rank.is_some() {
        header.push("true_rank".into());
    }
    if ds.true_logpdf.is_some() {
        header.push("true_logpdf".into());
    }
    let mut agree = 0usize;
    let rows = md.iter().enumerate().map(|(r, m)| {
        let mut row: Vec<String> = x.row(r).iter().map(|&v| fmt_f64(v)).collect();
        row.extend([fmt_f64(m.log_pm), m.rank.to_string()]);
        if let Some(t) = &ds.true_rank {
            agree += usize::from(t[r] as usize == m.rank);
            row.push(t[r].to_string());
        }
        if let Some(t) = &ds.true_logpdf {
            row.push(fmt_f64(t[r]));
        }
        row
    });
    let bytes = csv_bytes(&header, rows.collect::<Vec<_>>());
    let out = resolve_out(&a.out);
    let mut run = Run::new("manifold-density", argv, a, None)?;
    run.write(&out, &bytes)?;
    if ds.true_rank.is_some() {
        run.notes.push(format!("rank agreement {agree}/{}", md.len()));
        println!("rank agreement {agree}/{}", md.len());
    }
    println!("{} points to {}", md.len(), out.display());
    run.finish(&file_manifest(&out))
}

pub fn cookbook_check(a: &CookbookArgs, argv: &[String]) -> Result<()> {
    if a.trials == 0 || a.max_dim < 2 {
        return Err(fail(Category::Config, "cookbook-check needs --trials >= 1 and --max-dim >= 2"));
    }
    let rows = audit(a.trials, a.max_dim, a.seed);
    let pass = rows.iter().all(|r| r.pass);
    for r in &rows {
        println!("{:<34} max violation {:.3e} (tolerance {:.0e}) {}", r.claim, r.max_violation, r.tolerance, if r.pass { "pass" } else { "FAIL" });
    }
    let doc = json!({ "trials": a.trials, "max_dim": a.max_dim, "seed": a.seed, "pass": pass, "rows": rows });
    let out: PathBuf = resolve_out(&a.out);
    let mut run = Run::new("cookbook-check", argv, a, Some(a.seed))?.with_hash(hash_json(&(a.trials, a.max_dim, a.seed))?);
    run.write(&out, &json_bytes(&doc)?)?;
    run.finish(&file_manifest(&out))?;
    if !pass {
        return Err(fail(Category::Audit, "cookbook audit found violations above tolerance"));
    }
    Ok(())
}
