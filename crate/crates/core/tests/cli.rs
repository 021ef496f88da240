use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use contraspeech::cli::config::RunConfig;
use contraspeech::cli::formats::{Checkpoint, FeatureFile, FeatureIndex, IndexEntry, PcaFile};
use contraspeech::cpc::EncoderConfig;
use contraspeech::diagnostics::PcaModel;
use contraspeech::nn::{Param, ParamSet};
use contraspeech::rng::{stream, Stream};
use contraspeech::{Error, FeatureMatrix};
use rand_distr::{Distribution, StandardNormal};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_contraspeech"));
    c.env("CONTRASPEECH_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, lines: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, lines).unwrap();
    path
}

// Small models so the command-level tests stay quick.
const TINY: &str = "\
encoder.filters = 8,8,8,16,16,16
encoder.groups = 4
context.layers = 1
context.units = 8
context.blocks = 1
context.heads = 2
context.ffn_dim = 16
loss.offsets = 2
loss.codebook_entries = 4
loss.codeword_dim = 4
train.batch_seconds = 2
asr.conv_units = 8,8,8
asr.rnn_layers = 1
asr.rnn_units = 8
asr.batch_seconds = 4
";

fn synth_dir(dir: &Path, utts: usize) -> PathBuf {
    let out = dir.join("corpus");
    ok(&["synth", "--utts", &utts.to_string(), "--vocab", "5", "--seed", "7", "--out", p(&out), "--heldout", "3"]);
    out
}

#[test]
fn config_round_trips_through_print_config() {
    let dir = TempDir::new().unwrap();
    let cfg_path = write_config(dir.path(), "# comment\ncontext.mode = bi\nloss.offsets = 6\n");
    let printed = ok(&["print-config", "--config", p(&cfg_path)]);
    let again = write_config(dir.path(), &printed);
    let reparsed = RunConfig::load(&again).unwrap();
    let mut expected = RunConfig::default();
    expected.set("context.mode", "bi").unwrap();
    expected.set("loss.offsets", "6").unwrap();
    assert_eq!(reparsed, expected);
    assert_eq!(ok(&["print-config", "--config", p(&again)]), printed);
    assert_eq!(RunConfig::parse(&RunConfig::default().render()).unwrap(), RunConfig::default());
}

#[test]
fn config_rejects_bad_input() {
    for text in [
        "encoder.filterz = 1",
        "loss.offsets = 0",
        "context.mode = sideways",
        "pca.threshold = 1.5",
        "loss.offsets = 3\nloss.offsets = 4",
        "no equals sign",
        "encoder.filters = 8,8",
        "asr.conv_units = 8,8",
    ] {
        assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
    }
    let dir = TempDir::new().unwrap();
    let bad = write_config(dir.path(), "train.stepz = 3\n");
    let out = run(&["print-config", "--config", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.stepz"));
}

fn sample_checkpoint() -> Checkpoint {
    let mut params = ParamSet::new();
    params.insert("a.weight", Param::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap());
    params.insert("b", Param::new(vec![1], vec![0.5]).unwrap());
    let mut ckpt = Checkpoint::new(params);
    ckpt.metadata.insert("kind".into(), "cpc".into());
    ckpt.metadata.insert("seed".into(), "3".into());
    ckpt.metadata.insert("step".into(), "10".into());
    ckpt
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let ckpt = sample_checkpoint();
    let bytes = ckpt.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { field, .. }) if field.contains("magic")));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { field, .. }) if field.contains("version")));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(Checkpoint::from_bytes(&long).is_err());
}

#[test]
fn feature_and_pca_files_round_trip() {
    let f = FeatureFile { id: "utt00001".into(), features: FeatureMatrix::new(2, 3, vec![1.0, 2.0, 3.0, -4.0, 5.5, 6.0]).unwrap() };
    let bytes = f.to_bytes();
    assert_eq!(FeatureFile::from_bytes(&bytes).unwrap(), f);
    assert!(FeatureFile::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    let mut extra = bytes.clone();
    extra.extend_from_slice(&[0; 4]);
    assert!(FeatureFile::from_bytes(&extra).is_err());

    let model = PcaModel::mean_only(&f.features).unwrap();
    let file = PcaFile { model, whiten: true };
    assert_eq!(PcaFile::from_bytes(&file.to_bytes()).unwrap(), file);

    let dir = TempDir::new().unwrap();
    let index = FeatureIndex {
        feature_rate: 100.0,
        entries: vec![IndexEntry { id: "u".into(), path: dir.path().join("u.csft"), rows: 2 }],
    };
    let path = dir.path().join("index.tsv");
    index.save(&path).unwrap();
    assert_eq!(FeatureIndex::load(&path).unwrap(), index);
    assert!(fs::read_to_string(&path).unwrap().contains("u\tu.csft\t2"));
}

#[test]
fn synth_is_deterministic_and_guards_the_vocabulary() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["synth", "--utts", "50", "--vocab", "5", "--seed", "7", "--out", p(out)]);
    }
    let manifest = fs::read_to_string(a.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 50);
    assert_eq!(manifest, fs::read_to_string(b.join("manifest.tsv")).unwrap());
    for name in ["utt00000.wav", "utt00049.wav"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
    let out = run(&["synth", "--utts", "5", "--vocab", "9", "--out", p(&dir.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run(&["synth", "--utts", "x", "--out", "y"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_are_io_errors() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.tsv");
    let out = run(&["pretrain", "--manifest", p(&missing), "--out", p(&dir.path().join("m.cspk"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.tsv"));
}

#[test]
fn corrupted_checkpoints_are_rejected_before_work() {
    let dir = TempDir::new().unwrap();
    let corpus = synth_dir(dir.path(), 2);
    let ckpt = dir.path().join("bad.cspk");
    fs::write(&ckpt, b"CSPX\x01\x00").unwrap();
    let out = run(&["extract", "--checkpoint", p(&ckpt), "--manifest", p(&corpus.join("manifest.tsv")), "--out", p(&dir.path().join("f"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(!dir.path().join("f").exists());
}

fn log_header(ckpt: &Path) -> String {
    let log = fs::read_to_string(format!("{}.log", ckpt.display())).unwrap();
    log.lines().find(|l| l.starts_with("step")).unwrap().to_string()
}

#[test]
fn pretrain_extract_pca_pipeline() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let corpus = synth_dir(dir.path(), 4);
    let manifest = corpus.join("manifest.tsv");

    let bi = dir.path().join("bi.cspk");
    let common = ["--manifest", p(&manifest), "--config", p(&cfg), "--steps", "2", "--seed", "5", "--no-timestamps"];
    ok(&[&["pretrain", "--objective", "cpc", "--bidirectional", "--out", p(&bi)], &common[..]].concat());
    assert_eq!(log_header(&bi), "step\tloss\tloss_fwd\tloss_bwd");
    let log = fs::read_to_string(format!("{}.log", bi.display())).unwrap();
    assert!(!log.contains("unix"));

    let bi2 = dir.path().join("bi2.cspk");
    ok(&[&["pretrain", "--objective", "cpc", "--bidirectional", "--out", p(&bi2)], &common[..]].concat());
    assert_eq!(fs::read(&bi).unwrap(), fs::read(&bi2).unwrap());
    assert_eq!(fs::read(format!("{}.log", bi.display())).unwrap(), fs::read(format!("{}.log", bi2.display())).unwrap());

    let masked = dir.path().join("masked.cspk");
    ok(&[&["pretrain", "--objective", "masked", "--out", p(&masked)], &common[..]].concat());
    assert_eq!(log_header(&masked), "step\tloss\tcontrastive\tdiversity");

    let feats = dir.path().join("feats");
    let out = ok(&["extract", "--checkpoint", p(&bi), "--manifest", p(&manifest), "--out", p(&feats)]);
    assert!(out.contains("width\t16"));
    let index = FeatureIndex::load(&feats.join("index.tsv")).unwrap();
    assert_eq!(index.feature_rate, 100.0);
    let enc = RunConfig::load(&cfg).unwrap().encoder_config();
    let manifest_text = fs::read_to_string(&manifest).unwrap();
    for (e, f) in index.entries.iter().zip(index.load_features().unwrap()) {
        let wav = contraspeech::data::read_wav(&corpus.join(format!("{}.wav", e.id))).unwrap();
        assert_eq!(Some(f.features.rows()), enc.output_len(wav.samples.len()));
        assert_eq!(f.features.cols(), 16);
        assert!(manifest_text.contains(&e.id));
    }
    let feats2 = dir.path().join("feats2");
    ok(&["extract", "--checkpoint", p(&bi), "--manifest", p(&manifest), "--out", p(&feats2)]);
    assert_eq!(fs::read(feats.join("utt00000.csft")).unwrap(), fs::read(feats2.join("utt00000.csft")).unwrap());

    let masked_feats = dir.path().join("mfeats");
    ok(&["extract", "--checkpoint", p(&masked), "--manifest", p(&manifest), "--out", p(&masked_feats)]);
    assert_eq!(FeatureIndex::load(&masked_feats.join("index.tsv")).unwrap().feature_rate, 50.0);

    let pca = dir.path().join("pca.cspc");
    let out = ok(&["pca", "--index", p(&feats.join("index.tsv")), "--out", p(&pca)]);
    assert!(out.contains("linear_dimensionality\t"));
    let curve = fs::read_to_string(format!("{}.curve", pca.display())).unwrap();
    assert_eq!(curve.lines().count(), 16);
    let last: f64 = curve.lines().last().unwrap().split('\t').nth(1).unwrap().parse().unwrap();
    assert!((last - 1.0).abs() < 1e-5);

    let mean_only = dir.path().join("mean.cspc");
    ok(&["pca", "--index", p(&feats.join("index.tsv")), "--out", p(&mean_only), "--mean-only"]);
    assert!(PcaFile::read(&mean_only).unwrap().model.is_mean_only());
    assert!(!PcaFile::read(&pca).unwrap().model.is_mean_only());
}

fn write_features(dir: &Path, mats: Vec<(String, FeatureMatrix)>, rate: f64) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let mut entries = Vec::new();
    for (id, m) in mats {
        let path = dir.join(format!("{id}.csft"));
        let rows = m.rows();
        FeatureFile { id: id.clone(), features: m }.write(&path).unwrap();
        entries.push(IndexEntry { id, path, rows });
    }
    let index = dir.join("index.tsv");
    FeatureIndex { feature_rate: rate, entries }.save(&index).unwrap();
    index
}

#[test]
fn pca_reports_constructed_rank() {
    let dir = TempDir::new().unwrap();
    let mut rng = stream(3, Stream::Data);
    let dirs: Vec<f32> = (0..30).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut mats = Vec::new();
    for u in 0..4 {
        let mut data = Vec::with_capacity(200 * 10);
        for _ in 0..200 {
            let g: Vec<f32> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            for j in 0..10 {
                let noise: f32 = StandardNormal.sample(&mut rng);
                data.push((0..3).map(|k| g[k] * dirs[k * 10 + j]).sum::<f32>() + 1e-6 * noise);
            }
        }
        mats.push((format!("u{u}"), FeatureMatrix::new(200, 10, data).unwrap()));
    }
    let index = write_features(&dir.path().join("f"), mats, 100.0);
    let out = ok(&["pca", "--index", p(&index), "--out", p(&dir.path().join("m.cspc")), "--threshold", "0.99"]);
    assert!(out.contains("linear_dimensionality\t3\n"), "{out}");
}

fn manifest_for(dir: &Path, ids: &[(&str, &str)]) -> PathBuf {
    let text: String = ids.iter().map(|(id, t)| format!("{id}\t{id}.wav\t1.0\t{t}\n")).collect();
    let path = dir.join("labels.tsv");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn train_asr_and_eval_commands() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let mut rng = stream(4, Stream::Data);
    let labels = [("u0", "a b"), ("u1", "c d e"), ("u2", "b b")];
    let mats = labels
        .iter()
        .map(|(id, _)| {
            let data: Vec<f32> = (0..40 * 6).map(|i| Distribution::<f32>::sample(&StandardNormal, &mut rng) * (1.0 + (i % 6) as f32)).collect();
            (id.to_string(), FeatureMatrix::new(40, 6, data).unwrap())
        })
        .collect();
    let index = write_features(&dir.path().join("f"), mats, 50.0);
    let manifest = manifest_for(dir.path(), &labels);
    let pca = dir.path().join("pca.cspc");
    ok(&["pca", "--index", p(&index), "--out", p(&pca)]);

    let ckpt = dir.path().join("asr.cspk");
    let args = ["train-asr", "--index", p(&index), "--manifest", p(&manifest), "--config", p(&cfg), "--steps", "3", "--no-timestamps"];
    ok(&[&args[..], &["--out", p(&ckpt), "--pca-model", p(&pca)]].concat());
    let stored = Checkpoint::read(&ckpt).unwrap();
    assert_eq!(stored.meta("asr.feature_rate").unwrap(), "50");
    // 50 Hz features select unit strides: the first conv keeps the frame count.
    assert_eq!(stored.params.get("conv0.weight").unwrap().shape, vec![8, 6, 3]);
    let log = fs::read_to_string(format!("{}.log", ckpt.display())).unwrap();
    assert_eq!(log.lines().filter(|l| l.chars().next().unwrap().is_ascii_digit()).count(), 3);

    // The stored transform decorrelates the training features.
    let mean = &stored.params.get("input.mean").unwrap().data;
    let rot = &stored.params.get("input.rotation").unwrap().data;
    let all: Vec<Vec<f64>> = FeatureIndex::load(&index)
        .unwrap()
        .load_features()
        .unwrap()
        .iter()
        .flat_map(|f| f.features.row_iter().map(|r| r.to_vec()).collect::<Vec<_>>())
        .map(|r| (0..6).map(|j| (0..6).map(|k| rot[j * 6 + k] as f64 * (r[k] - mean[k]) as f64).sum()).collect())
        .collect();
    let cov = |a: usize, b: usize| all.iter().map(|r| r[a] * r[b]).sum::<f64>() / (all.len() - 1) as f64;
    for a in 0..6 {
        for b in 0..6 {
            if a != b {
                assert!(cov(a, b).abs() < 1e-4 * cov(0, 0), "{a},{b}: {}", cov(a, b));
            }
        }
    }

    let ckpt2 = dir.path().join("asr2.cspk");
    ok(&[&args[..], &["--out", p(&ckpt2), "--pca-model", p(&pca)]].concat());
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&ckpt2).unwrap());

    let report_path = dir.path().join("report.txt");
    let report = ok(&["eval", "--checkpoint", p(&ckpt), "--index", p(&index), "--manifest", p(&manifest), "--out", p(&report_path)]);
    assert_eq!(report, fs::read_to_string(&report_path).unwrap());
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("u0\ta b\t"));
    assert_eq!(lines[0].split('\t').count(), 4);
    assert!(lines[3].starts_with("WER\t") && lines[4].starts_with("CER\t"));

    let wrong = manifest_for(&dir.path().join("f"), &[("u0", "a z"), ("u1", "c"), ("u2", "b")]);
    let out = run(&["eval", "--checkpoint", p(&ckpt), "--index", p(&index), "--manifest", p(&wrong)]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn mostly_unalignable_corpus_is_a_contract_error() {
    let dir = TempDir::new().unwrap();
    let labels = [("u0", "a b c d"), ("u1", "a b c d"), ("u2", "a")];
    let mats = labels.iter().map(|(id, _)| (id.to_string(), FeatureMatrix::new(3, 4, vec![0.5; 12]).unwrap())).collect();
    let index = write_features(&dir.path().join("f"), mats, 100.0);
    let manifest = manifest_for(dir.path(), &labels);
    let out = run(&["train-asr", "--index", p(&index), "--manifest", p(&manifest), "--out", p(&dir.path().join("a.cspk")), "--steps", "1"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn logmel_training_uses_80_dims() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let corpus = synth_dir(dir.path(), 3);
    let ckpt = dir.path().join("mel.cspk");
    let manifest = corpus.join("manifest.tsv");
    ok(&["train-asr", "--logmel", "--manifest", p(&manifest), "--config", p(&cfg), "--steps", "2", "--out", p(&ckpt)]);
    let stored = Checkpoint::read(&ckpt).unwrap();
    assert_eq!(stored.meta("asr.input_dim").unwrap(), "80");
    assert_eq!(stored.meta("asr.feature_rate").unwrap(), "100");
    let report = ok(&["eval", "--checkpoint", p(&ckpt), "--logmel", "--manifest", p(&corpus.join("heldout.tsv"))]);
    assert_eq!(report.lines().count(), 5);
    let out = run(&["eval", "--checkpoint", p(&ckpt), "--index", p(&manifest), "--manifest", p(&manifest)]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn encoder_defaults_match_the_desk_preset() {
    assert_eq!(RunConfig::default().encoder_config(), EncoderConfig::desk());
}
