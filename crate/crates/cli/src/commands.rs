use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ddad_core::data::{
    export_dataset, generate_synthetic, ingest_directory, ingest_test_pool, ingest_training_pools, DatasetSpec,
};
use ddad_core::eval::{method_comparison_report, run_ar_sweep, EvalReport, ExperimentSettings, ReportMetadata};
use ddad_core::scoring::{write_map_pgm, write_map_raw};
use ddad_core::{
    load_checkpoint, save_checkpoint, score_pool, train_dual_ensembles, write_loss_csv, BackboneConfig, BackboneKind,
    DdadError, EnsembleModule, Result, Role, ScoreKind, TrainConfig,
};

use crate::manifest::{sha256_file, Manifest, MANIFEST_SUFFIX};
use crate::options::{Options, ResolvedConfig};

pub fn checkpoint_name(role: Role, member: usize) -> String {
    format!("module{role}_member{member}.ckpt")
}

fn csv_error(e: csv::Error) -> DdadError {
    DdadError::Config(format!("csv: {e}"))
}

fn create_out(o: &Options) -> Result<PathBuf> {
    let out = o.out();
    fs::create_dir_all(&out)?;
    Ok(out)
}

fn member_seeds(t: &TrainConfig) -> BTreeMap<String, Vec<u64>> {
    BTreeMap::from([
        ("module_a".to_string(), (0..t.k).map(|i| t.member_seed(Role::A, i)).collect()),
        ("module_b".to_string(), (0..t.k).map(|i| t.member_seed(Role::B, i)).collect()),
    ])
}

fn manifest<'a>(command: &'a str, config: &'a ResolvedConfig, seeds: BTreeMap<String, Vec<u64>>) -> Manifest<'a> {
    Manifest { command, config, seeds, inputs: BTreeMap::new(), artifacts: BTreeMap::new() }
}

pub fn synth(o: &Options) -> Result<()> {
    let config = ResolvedConfig::new(o)?;
    let out = create_out(o)?;
    let spec = generate_synthetic(&config.synthetic)?;
    export_dataset(&spec, &out)?;
    println!(
        "wrote {} normal, {} unlabeled ({} abnormal), {} test images to {}",
        spec.normal.len(),
        spec.unlabeled.len(),
        config.synthetic.abnormal_unlabeled(),
        spec.test.len(),
        out.display()
    );
    let seeds = BTreeMap::from([("data".to_string(), vec![config.synthetic.seed])]);
    let written = ["normal", "unlabeled", "test", "provenance.csv"];
    manifest("synth", &config, seeds).write(&out, &written)
}

pub fn train(o: &Options) -> Result<()> {
    let config = ResolvedConfig::new(o)?;
    let (normal, unlabeled) = ingest_training_pools(o.data("train")?)?;
    let out = create_out(o)?;
    let backbone = BackboneConfig::new(config.backbone, config.train.base_seed);
    let (a, b) = train_dual_ensembles(&normal, &unlabeled, &backbone, &config.train)?;
    for module in [&a, &b] {
        for (i, net) in module.nets.iter().enumerate() {
            save_checkpoint(net, &out.join(checkpoint_name(module.role, i)))?;
        }
    }
    write_loss_csv(BufWriter::new(fs::File::create(out.join("loss.csv"))?), &[&a, &b])?;
    println!(
        "trained {} x {} {} networks on {} normal and {} unlabeled images",
        2,
        config.train.k,
        config.backbone,
        normal.len(),
        unlabeled.len()
    );
    let names: Vec<String> = [Role::A, Role::B]
        .iter()
        .flat_map(|&r| (0..config.train.k).map(move |i| checkpoint_name(r, i)))
        .chain(["loss.csv".to_string()])
        .collect();
    manifest("train", &config, member_seeds(&config.train))
        .write(&out, &names.iter().map(String::as_str).collect::<Vec<_>>())
}

/// Loads `module{role}_member{i}.ckpt` for i = 0, 1, ... until one is missing.
fn load_module(
    dir: &Path,
    role: Role,
    kind: Option<BackboneKind>,
    inputs: &mut BTreeMap<String, String>,
) -> Result<EnsembleModule> {
    let mut nets = Vec::new();
    loop {
        let name = checkpoint_name(role, nets.len());
        let path = dir.join(&name);
        if !path.is_file() {
            break;
        }
        let net = load_checkpoint(&path, kind)?;
        inputs.insert(name, sha256_file(&path)?);
        nets.push(net);
    }
    Ok(EnsembleModule { role, nets, loss_curves: Vec::new() })
}

pub fn score(o: &Options) -> Result<()> {
    let mut config = ResolvedConfig::new(o)?;
    let test = ingest_test_pool(o.data("score")?)?;
    let out = create_out(o)?;
    let ckpt_dir = o.checkpoints.clone().unwrap_or_else(|| out.clone());
    let mut inputs = BTreeMap::new();
    let mut b = load_module(&ckpt_dir, Role::B, o.backbone, &mut inputs)?;
    let Some(kind) = b.nets.first().map(|n| n.kind()) else {
        return Err(DdadError::Config(format!("no module B checkpoints in {}", ckpt_dir.display())));
    };
    let mut a = load_module(&ckpt_dir, Role::A, Some(kind), &mut inputs)?;
    let seeds = BTreeMap::from([
        ("module_a".to_string(), a.nets.iter().map(|n| n.config().seed).collect()),
        ("module_b".to_string(), b.nets.iter().map(|n| n.config().seed).collect()),
    ]);
    let kinds = o.score_kinds(kind);
    config.backbone = kind;
    config.score = kinds.clone();
    let a = if a.nets.is_empty() { None } else { Some(&mut a) };
    let scored = score_pool(a, &mut b, &test.images, &kinds, config.sigma_pooling, 64)?;

    let mut w = csv::Writer::from_path(out.join("scores.csv")).map_err(csv_error)?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend(kinds.iter().map(|k| k.to_string()));
    w.write_record(&header).map_err(csv_error)?;
    let per_kind: Vec<Vec<f64>> = kinds.iter().map(|&k| scored.image_scores(k).expect("scored")).collect();
    for (j, id) in scored.ids.iter().enumerate() {
        let mut row = vec![id.clone(), test.labels[j].to_string()];
        row.extend(per_kind.iter().map(|s| s[j].to_string()));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;

    if o.maps {
        for (k, maps) in kinds.iter().zip(&scored.maps) {
            for (id, map) in scored.ids.iter().zip(maps) {
                let stem = out.join("maps").join(k.as_str()).join(id.trim_end_matches(".pgm").trim_end_matches(".png"));
                fs::create_dir_all(stem.parent().expect("map path has a parent"))?;
                write_map_pgm(map, &stem.with_extension("pgm"))?;
                write_map_raw(map, &stem.with_extension("f32"))?;
            }
        }
    }
    println!("scored {} test images with {} kinds", test.len(), kinds.len());
    let mut m = manifest("score", &config, seeds);
    m.inputs = inputs;
    m.write(&out, if o.maps { &["scores.csv", "maps"] } else { &["scores.csv"] })
}

struct ScoreTable {
    ids: Vec<String>,
    labels: Vec<u8>,
    scores: BTreeMap<ScoreKind, Vec<f64>>,
}

fn read_scores(path: &Path) -> Result<ScoreTable> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let header = r.headers().map_err(csv_error)?.clone();
    if header.len() < 3 || &header[0] != "id" || &header[1] != "label" {
        return Err(DdadError::Config(format!("{}: expected header id,label,<score kinds>", path.display())));
    }
    let kinds: Vec<ScoreKind> = header.iter().skip(2).map(str::parse).collect::<Result<_>>()?;
    let mut t =
        ScoreTable { ids: Vec::new(), labels: Vec::new(), scores: kinds.iter().map(|&k| (k, Vec::new())).collect() };
    for record in r.records() {
        let record = record.map_err(csv_error)?;
        t.ids.push(record[0].to_string());
        t.labels.push(record[1].parse().map_err(|e| DdadError::Config(format!("label '{}': {e}", &record[1])))?);
        for (k, v) in kinds.iter().zip(record.iter().skip(2)) {
            let v = v.parse().map_err(|e| DdadError::Config(format!("score '{v}': {e}")))?;
            t.scores.get_mut(k).expect("kind from header").push(v);
        }
    }
    Ok(t)
}

/// Backbone, K and checkpoint seeds from the `score` manifest next to a
/// scores table, when there is one.
fn score_metadata(dir: &Path) -> ReportMetadata {
    let mut m = ReportMetadata::default();
    let Ok(text) = fs::read_to_string(dir.join(format!("score{MANIFEST_SUFFIX}"))) else {
        return m;
    };
    let Ok(json) = serde_json::from_str::<serde_json::Value>(&text) else {
        return m;
    };
    m.backbone = json["config"]["backbone"].as_str().and_then(|b| b.parse().ok());
    let seeds = |key: &str| -> Vec<u64> {
        json["seeds"][key].as_array().map(|a| a.iter().filter_map(|v| v.as_u64()).collect()).unwrap_or_default()
    };
    let b = seeds("module_b");
    m.k = (!b.is_empty()).then_some(b.len());
    m.seeds = seeds("module_a").into_iter().chain(b).collect();
    m
}

pub fn eval(o: &Options) -> Result<()> {
    let config = ResolvedConfig::new(o)?;
    let out = create_out(o)?;
    let path = o.scores.clone().unwrap_or_else(|| out.join("scores.csv"));
    let mut table = read_scores(&path)?;
    if let Some(wanted) = &o.score {
        table.scores.retain(|k, _| wanted.contains(k));
        if let Some(missing) = wanted.iter().find(|k| !table.scores.contains_key(k)) {
            return Err(DdadError::Eval(format!("{} has no '{missing}' column", path.display())));
        }
    }
    let mut metadata = path.parent().map(score_metadata).unwrap_or_default();
    metadata.backbone = o.backbone.or(metadata.backbone);
    metadata.k = o.k.or(metadata.k);
    metadata.anomaly_rate = o.ar;
    let report = EvalReport::build(&table.ids, &table.labels, &table.scores, metadata)?;
    fs::write(out.join("report.json"), report.to_json()?)?;
    let mut written = vec!["report.json".to_string(), "auc.csv".to_string()];
    let mut auc_csv = String::from("score_kind,auc\n");
    for (kind, auc) in &report.auc {
        auc_csv.push_str(&format!("{kind},{auc}\n"));
        println!("{:>14}  AUC {auc:.4}", kind.as_str());
    }
    fs::write(out.join("auc.csv"), auc_csv)?;
    for (kind, h) in &report.histograms {
        let name = format!("histogram_{kind}.csv");
        fs::write(out.join(&name), h.to_csv())?;
        written.push(name);
    }
    let mut m = manifest("eval", &config, BTreeMap::new());
    m.inputs.insert(path.to_string_lossy().into_owned(), sha256_file(&path)?);
    m.write(&out, &written.iter().map(String::as_str).collect::<Vec<_>>())
}

pub fn sweep(o: &Options) -> Result<()> {
    let config = ResolvedConfig::new(o)?;
    let out = create_out(o)?;
    let mut settings = ExperimentSettings::new(config.backbone, config.train.clone());
    settings.kinds = config.score.clone();
    settings.pooling = config.sigma_pooling;
    let table = run_ar_sweep(&config.ar_grid, &config.synthetic, &settings)?;
    table.write_csv(BufWriter::new(fs::File::create(out.join("sweep.csv"))?))?;
    fs::write(
        out.join("sweep.json"),
        serde_json::to_string_pretty(&table).map_err(|e| DdadError::Eval(e.to_string()))? + "\n",
    )?;
    for (ar, message) in &table.failures {
        eprintln!("warning: AR {ar} failed: {message}");
    }
    println!("swept {} anomaly rates, {} failed", config.ar_grid.len(), table.failures.len());
    manifest("sweep", &config, member_seeds(&config.train)).write(&out, &["sweep.csv", "sweep.json"])?;
    if !config.ar_grid.is_empty() && table.failures.len() == config.ar_grid.len() {
        return Err(DdadError::Eval("every sweep point failed".into()));
    }
    Ok(())
}

pub fn compare(o: &Options) -> Result<()> {
    let config = ResolvedConfig::new(o)?;
    let data: DatasetSpec = match &o.data {
        Some(dir) => ingest_directory(dir)?,
        None => generate_synthetic(&config.synthetic)?,
    };
    let out = create_out(o)?;
    let backbones = match o.backbone {
        Some(b) => vec![b],
        None => vec![BackboneKind::Ae, BackboneKind::Aeu],
    };
    let specs: Vec<(BackboneKind, ScoreKind)> =
        backbones.iter().flat_map(|&b| o.score_kinds(b).into_iter().map(move |k| (b, k))).collect();
    let report = method_comparison_report(&specs, &data, &config.train)?;
    let table = report.to_table();
    print!("{table}");
    fs::write(out.join("comparison.txt"), table)?;
    fs::write(out.join("comparison.json"), report.to_json()?)?;
    manifest("compare", &config, member_seeds(&config.train)).write(&out, &["comparison.txt", "comparison.json"])
}
