use std::path::{Path, PathBuf};

use flowcaps::checkpoint::Checkpoint;
use flowcaps::classifier::{
    epochs_csv, evaluate_classifier, train_classifier, Classifier, ClassifierConfig, ClassifierOptions, LabeledFlows,
};
use flowcaps::config::{KvText, ModelConfig, PRESETS};
use flowcaps::dataset::FlowData;
use flowcaps::flow_io::{flow_to_color, read_flo_file, read_ppm_file, write_flo_file, write_ppm_file};
use flowcaps::gradcheck;
use flowcaps::network::FlowModel;
use flowcaps::optim::AdamConfig;
use flowcaps::protocol::{protocol_low_data, protocol_ood, ProtocolOptions, RunResult};
use flowcaps::synth::{gen_dataset, pair_tensor, Manifest, Normalization, SceneSpec, Split, NUM_CLASSES};
use flowcaps::train::{continue_training, evaluate, model_from_checkpoint, TrainOptions, Trainer};
use flowcaps::{FlowField, Real};

use crate::args::*;
use crate::Failure;

type Out = Result<(), Failure>;

pub fn execute(cli: &Cli) -> Out {
    let g = &cli.global;
    match &cli.command {
        Command::GenData(a) => gen_data(g, a),
        Command::Viz(a) => viz(g, a),
        Command::Params(a) => params(a),
        Command::Gradcheck(a) => run_gradcheck(g, a),
        other => match g.precision {
            Precision::F32 => typed::<f32>(g, other),
            Precision::F64 => typed::<f64>(g, other),
        },
    }
}

fn typed<T: Real>(g: &Global, cmd: &Command) -> Out {
    match cmd {
        Command::TrainFlow(a) => train_flow::<T>(g, a),
        Command::EvalFlow(a) => eval_flow::<T>(g, a),
        Command::Predict(a) => predict::<T>(g, a),
        Command::TrainCls(a) => train_cls::<T>(g, a),
        Command::EvalCls(a) => eval_cls::<T>(g, a),
        Command::ProtocolLowdata(a) => lowdata::<T>(g, a),
        Command::ProtocolOod(a) => ood::<T>(g, a),
        Command::GenData(_) | Command::Viz(_) | Command::Params(_) | Command::Gradcheck(_) => {
            unreachable!("precision-independent commands are dispatched earlier")
        }
    }
}

fn out_dir(g: &Global) -> Result<PathBuf, Failure> {
    std::fs::create_dir_all(&g.out).map_err(|e| Failure::runtime("io", format!("{}: {e}", g.out.display())))?;
    Ok(g.out.clone())
}

/// `--out` names a file when it carries `ext`, otherwise a directory receiving `default`.
fn out_file(g: &Global, ext: &str, default: &str) -> Result<PathBuf, Failure> {
    if g.out.extension().is_some_and(|e| e == ext) {
        if let Some(parent) = g.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Failure::runtime("io", format!("{}: {e}", parent.display())))?;
        }
        Ok(g.out.clone())
    } else {
        Ok(out_dir(g)?.join(default))
    }
}

fn write(path: &Path, text: &str) -> Out {
    std::fs::write(path, text).map_err(|e| Failure::runtime("io", format!("{}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    }
}

fn load_split<T: Real>(data: &Path, split: Split) -> Result<FlowData<T>, Failure> {
    let m = Manifest::load(data)?;
    Ok(FlowData::from_manifest(&m, split, Normalization::Symmetric)?)
}

fn train_options(a: &TrainArgs, seed: u64) -> TrainOptions {
    TrainOptions {
        loss: a.loss,
        epochs: a.epochs,
        batch: a.batch,
        seed,
        adam: AdamConfig { lr: a.lr, ..AdamConfig::default() },
        patience: (a.patience > 0).then_some(a.patience),
        target_epe: a.target_epe,
        flip: a.flip,
    }
}

fn model_config(preset: Option<&str>, file: Option<&Path>) -> Result<ModelConfig, Failure> {
    match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::runtime("io", format!("{}: {e}", p.display())))?;
            let mut kv = KvText::parse(&text)?;
            if kv.get("preset").is_none() {
                kv.push("preset", preset.unwrap_or("flowcaps-mini"));
            }
            Ok(ModelConfig::from_kv(&kv)?)
        }
        None => Ok(ModelConfig::preset(preset.unwrap_or("flowcaps-mini"))?),
    }
}

fn gen_data(g: &Global, a: &GenData) -> Out {
    let mut spec = match a.spec.as_str() {
        "default" => SceneSpec::default(),
        "small" => SceneSpec::with_size(32),
        file => {
            let text = std::fs::read_to_string(file).map_err(|e| Failure::runtime("io", format!("{file}: {e}")))?;
            serde_json::from_str(&text).map_err(|e| Failure::runtime("format", format!("{file}: {e}")))?
        }
    };
    if let Some(n) = a.size {
        let base = SceneSpec::with_size(n);
        spec = SceneSpec { held_out: spec.held_out, texture_seed: spec.texture_seed, max_disp: spec.max_disp, ..base };
    }
    if let Some(d) = a.max_disp {
        spec.max_disp = d;
    }
    if !a.held_out.is_empty() {
        spec.held_out = a.held_out.clone();
    }
    let dir = out_dir(g)?;
    let m = gen_dataset(&spec, a.n_train, a.n_test, g.seed, &dir)?;
    println!(
        "generated {} samples ({} train, {} test) at {}x{} in {}",
        m.samples.len(),
        a.n_train,
        a.n_test,
        spec.width,
        spec.height,
        dir.display()
    );
    Ok(())
}

fn train_flow<T: Real>(g: &Global, a: &TrainFlow) -> Out {
    let m = Manifest::load(&a.data)?;
    let train = FlowData::<T>::from_manifest(&m, Split::Train, Normalization::Symmetric)?;
    let test = FlowData::<T>::from_manifest(&m, Split::Test, Normalization::Symmetric)?;
    let opts = train_options(&a.train, g.seed);
    let (mut model, trainer) = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::<T>::load(p)?;
            let cfg: ModelConfig = ckpt.model_as()?;
            let mut model = FlowModel::build(&cfg, ckpt.seed)?;
            let t = Trainer::resume(&mut model, &ckpt, opts)?;
            println!("resuming {} at epoch {}", p.display(), t.epoch);
            (model, t)
        }
        None => {
            let cfg = model_config(Some(&a.preset), a.model.as_deref())?;
            let model = FlowModel::build(&cfg, g.seed)?;
            let t = Trainer::new(&model, opts)?;
            (model, t)
        }
    };
    let dir = out_dir(g)?;
    println!("model {}", model.config().summary());
    println!("parameters {}", model.count_params().total);
    println!(
        "data {} train / {} test, zero-flow test EPE {:.6}",
        train.len(),
        test.len(),
        test.zero_flow_epe()
    );
    write(&dir.join("model.txt"), &model.config().to_kv().to_string())?;
    let out = continue_training(&mut model, trainer, &train, &test, |r| {
        println!(
            "epoch {:>3} train_loss {:.6} test_epe {:.6} ({:.1}s)",
            r.epoch, r.train_loss, r.test_epe, r.seconds
        );
    })?;
    write(&dir.join("record.csv"), &out.record.to_csv())?;
    out.best.save(&dir.join("best.ckpt"))?;
    out.last.save(&dir.join("last.ckpt"))?;
    println!("best test EPE {:.6}", out.best_epe());
    Ok(())
}

fn eval_flow<T: Real>(g: &Global, a: &EvalFlow) -> Out {
    let ckpt = Checkpoint::<T>::load(&a.ckpt)?;
    let mut model = model_from_checkpoint(&ckpt)?;
    let data = load_split::<T>(&a.data, split_of(a.split))?;
    let report = evaluate(&mut model, &data, 16)?;
    let dir = out_dir(g)?;
    write(&dir.join("eval.csv"), &report.table_csv())?;
    println!("zero-flow EPE {:.6}", data.zero_flow_epe());
    println!("mean EPE {:.6}", report.mean_epe);
    Ok(())
}

fn predict<T: Real>(g: &Global, a: &Predict) -> Out {
    let ckpt = Checkpoint::<T>::load(&a.ckpt)?;
    let mut model = model_from_checkpoint(&ckpt)?;
    let f1 = read_ppm_file(&a.pair[0])?;
    let f2 = read_ppm_file(&a.pair[1])?;
    if (f1.width, f1.height) != (f2.width, f2.height) {
        return Err(Failure::runtime("shape", "the two frames differ in size"));
    }
    let x = pair_tensor::<T>(&f1, &f2, Normalization::Symmetric)?;
    let x = x.reshape(&[1, 6, f1.height, f1.width])?;
    let flow = FlowField::unstack(&model.predict(&x)?)?.remove(0);
    let path = out_file(g, "flo", "flow.flo")?;
    write_flo_file(&path, &flow)?;
    println!("wrote {} (max |flow| {:.4})", path.display(), flow.max_norm());
    Ok(())
}

fn viz(g: &Global, a: &Viz) -> Out {
    let field = read_flo_file(&a.flo)?;
    let img = flow_to_color(&field, a.max_norm);
    let stem = a.flo.file_stem().map_or("flow".into(), |s| s.to_string_lossy().into_owned());
    let path = out_file(g, "ppm", &format!("{stem}.ppm"))?;
    write_ppm_file(&path, &img)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn params(a: &Params) -> Out {
    let configs: Vec<ModelConfig> = match (&a.preset, &a.model) {
        (_, Some(p)) => vec![model_config(None, Some(p))?],
        (Some(name), None) => vec![ModelConfig::preset(name)?],
        (None, None) => PRESETS.iter().map(|p| ModelConfig::preset(p)).collect::<Result<_, _>>()?,
    };
    for cfg in configs {
        let count = FlowModel::<f32>::build(&cfg, 0)?.count_params();
        println!("{}", cfg.summary());
        println!("{count}");
        println!("{} params {} ({:.2}M)", cfg.preset, count.total, count.total as f64 / 1e6);
    }
    Ok(())
}

fn flows_for<T: Real>(data: &FlowData<T>, flow_ckpt: Option<&Path>) -> Result<LabeledFlows<T>, Failure> {
    match flow_ckpt {
        None => Ok(LabeledFlows::from_ground_truth(data)?),
        Some(p) => {
            let mut model = model_from_checkpoint(&Checkpoint::<T>::load(p)?)?;
            Ok(LabeledFlows::from_predictions(&mut model, data, 16)?)
        }
    }
}

fn train_cls<T: Real>(g: &Global, a: &TrainCls) -> Out {
    let m = Manifest::load(&a.data)?;
    let train = FlowData::<T>::from_manifest(&m, Split::Train, Normalization::Symmetric)?;
    let test = FlowData::<T>::from_manifest(&m, Split::Test, Normalization::Symmetric)?;
    let (tr, te) = (flows_for(&train, a.flow_ckpt.as_deref())?, flows_for(&test, a.flow_ckpt.as_deref())?);
    let mut model = Classifier::<T>::build(&ClassifierConfig::new(NUM_CLASSES), tr.height(), tr.width(), g.seed)?;
    let opts = ClassifierOptions { epochs: a.epochs, batch: a.batch, lr: a.lr, seed: g.seed };
    let log = train_classifier(&mut model, &tr, &te, &opts)?;
    for r in &log {
        println!("epoch {:>3} train_loss {:.6} test_accuracy {:.4}", r.epoch, r.train_loss, r.test_accuracy);
    }
    let report = evaluate_classifier(&model, &te)?;
    let dir = out_dir(g)?;
    let source = a.flow_ckpt.as_ref().map_or("gt".to_string(), |p| p.display().to_string());
    model.to_checkpoint(g.seed, a.epochs, &source).save(&dir.join("cls.ckpt"))?;
    write(&dir.join("cls_record.csv"), &epochs_csv(&log))?;
    write(&dir.join("confusion.csv"), &report.to_csv())?;
    println!("test accuracy {:.4}", report.accuracy);
    Ok(())
}

fn eval_cls<T: Real>(g: &Global, a: &EvalCls) -> Out {
    let (model, meta) = Classifier::<T>::from_checkpoint(&Checkpoint::load(&a.ckpt)?)?;
    let data = load_split::<T>(&a.data, split_of(a.split))?;
    let flows = flows_for(&data, a.flow_ckpt.as_deref())?;
    let report = evaluate_classifier(&model, &flows)?;
    write(&out_dir(g)?.join("confusion.csv"), &report.to_csv())?;
    println!("classifier trained on {}", meta.source);
    println!("accuracy {:.4}", report.accuracy);
    Ok(())
}

fn protocol_options(a: &ProtocolArgs, seed: u64) -> ProtocolOptions {
    ProtocolOptions {
        baseline: a.baseline.clone(),
        capsule: a.capsule.clone(),
        seeds: a.seeds.clone(),
        train: train_options(&a.train, seed),
    }
}

fn log_run(r: &RunResult) {
    println!(
        "run model {} seed {} fraction {:.2} samples {} epochs {} test_epe {:.6}",
        r.model, r.seed, r.fraction, r.train_samples, r.epochs, r.test_epe
    );
}

fn lowdata<T: Real>(g: &Global, a: &ProtocolLowdata) -> Out {
    let m = Manifest::load(&a.common.data)?;
    let train = FlowData::<T>::from_manifest(&m, Split::Train, Normalization::Symmetric)?;
    let test = FlowData::<T>::from_manifest(&m, Split::Test, Normalization::Symmetric)?;
    let report = protocol_low_data(&train, &test, &a.fractions, &protocol_options(&a.common, g.seed), log_run)?;
    let dir = out_dir(g)?;
    write(&dir.join("lowdata.csv"), &report.to_csv())?;
    write(&dir.join("lowdata_models.csv"), &report.long_csv())?;
    print!("{}", report.to_csv());
    Ok(())
}

fn ood<T: Real>(g: &Global, a: &ProtocolOod) -> Out {
    let m = Manifest::load(&a.common.data)?;
    let held_out = if a.held_out.is_empty() { m.spec.held_out.clone() } else { a.held_out.clone() };
    let train = FlowData::<T>::from_manifest(&m, Split::Train, Normalization::Symmetric)?;
    let test = FlowData::<T>::from_manifest(&m, Split::Test, Normalization::Symmetric)?;
    let report = protocol_ood(&train, &test, &held_out, &protocol_options(&a.common, g.seed), log_run)?;
    let dir = out_dir(g)?;
    write(&dir.join("ood.csv"), &report.to_csv())?;
    print!("{}", report.to_csv());
    println!("held-out samples in training batches: {}", report.held_out_seen);
    println!("capsule held-out / in-domain EPE ratio {:.4}", report.flowcaps_ratio());
    Ok(())
}

fn run_gradcheck(g: &Global, a: &Gradcheck) -> Out {
    if g.precision != Precision::F64 {
        println!("gradient checks always run in 64-bit precision");
    }
    let mut results = gradcheck::check_primitives(g.seed)?;
    results.push(gradcheck::check_classifier(4, g.seed)?);
    results.push(gradcheck::check_flow_model("flowcaps-mini", 32, a.model_probes, g.seed)?);
    let mut csv = String::from("name,rel_err,tolerance,probes,passed\n");
    for r in &results {
        println!("{r}");
        csv.push_str(&format!("{},{:.6e},{:e},{},{}\n", r.name, r.rel_err, r.tolerance, r.probes, r.passed()));
    }
    write(&out_dir(g)?.join("gradcheck.csv"), &csv)?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(Failure::runtime("gradcheck", format!("tolerance exceeded: {}", failed.join(", "))))
    }
}
