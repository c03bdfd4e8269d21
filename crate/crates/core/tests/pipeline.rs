use std::fs;
use std::path::Path;

use elastron::corpus::{ingest_corpus, synth_corpus, Corpus, SynthSpec};
use elastron::model::{DenseModel, ElasticModel, Selection};
use elastron::pipeline::{run_all, run_stage, Overrides, PipelineConfig, Stage};
use elastron::rng::Rng;
use elastron::Error;

const TINY: &str = r#"
seed = 5
output_dir = "out"
calibration_samples = 32
eval_sequences = 16
pareto_random = 8

[model]
vocab_size = 256
embed_dim = 16
num_layers = 2
num_heads = 2
head_dim = 8
mlp_hidden = 32
context_len = 16
mlp_widths = [16, 32]
head_counts = [1, 2]

[corpus]
seq_len = 17

[corpus.synthetic]
domains = [{ name = "easy", kind = "easy", sequences = 60 }, { name = "hard", kind = "hard", sequences = 60 }]

[pretrain]
steps = 30
val_interval = 10

[elastic]
steps = 30
val_interval = 10

[router]
steps = 30
finetune_steps = 5
monitor_sequences = 8
"#;

fn tiny(dir: &Path) -> PipelineConfig {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    PipelineConfig::load(&path).unwrap().effective(&Overrides::default()).unwrap()
}

#[test]
fn relative_paths_resolve_against_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    assert_eq!(cfg.output_dir, dir.path().join("out"));
    assert_eq!(cfg.pretrain.seed, 5);
    assert_eq!(cfg.router.seq_len, 17);

    let missing = format!("{TINY}\n").replace("[corpus]\n", "[corpus]\npaths = [\"nowhere.txt\"]\n");
    let path = dir.path().join("bad.toml");
    fs::write(&path, missing).unwrap();
    let loaded = PipelineConfig::load(&path).unwrap();
    assert_eq!(loaded.corpus.paths, vec![dir.path().join("nowhere.txt")]);
    assert!(matches!(loaded.effective(&Overrides::default()), Err(Error::Ingestion { .. })));
}

#[test]
fn config_survives_a_toml_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let back: PipelineConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
    let unknown = format!("bogus = 1\n{TINY}");
    fs::write(dir.path().join("u.toml"), unknown).unwrap();
    assert!(PipelineConfig::load(&dir.path().join("u.toml")).is_err());
}

#[test]
fn out_of_order_stage_names_what_is_missing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    match run_stage(&cfg, Stage::Sort) {
        Err(Error::StageOrder { stage, missing, .. }) => {
            assert_eq!(stage, "sort");
            assert_eq!(missing, "pretrain");
        }
        other => panic!("expected a stage-order error, got {other:?}"),
    }
    match run_stage(&cfg, Stage::FitLaw) {
        Err(Error::StageOrder { missing, .. }) => assert_eq!(missing, "pareto"),
        other => panic!("expected a stage-order error, got {other:?}"),
    }
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run_all(&cfg).unwrap();
    let out = &cfg.output_dir;

    // eval reports finite perplexities at each budget
    let mut r = csv::Reader::from_path(out.join("eval.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    let budgets: Vec<f64> = rows.iter().map(|x| x[0].parse().unwrap()).collect();
    assert_eq!(budgets, vec![0.5, 0.7, 1.0]);
    for x in &rows {
        let ppl: f64 = x[5].parse().unwrap();
        assert!(ppl.is_finite() && ppl >= 1.0);
    }

    // full-budget extraction evaluates exactly like the elastic full model
    let full_cfg = cfg.effective(&Overrides { budget: Some(1.0), ..Overrides::default() }).unwrap();
    run_stage(&full_cfg, Stage::Extract).unwrap();
    let dense = DenseModel::load(&out.join("extracted_b1.00")).unwrap();
    let elastic = ElasticModel::load(&out.join("finetuned")).unwrap();
    let batch = &cfg.corpus().unwrap().validation_batches(4, 16, 8).unwrap()[0];
    assert_eq!(dense.forward(batch).unwrap(), elastic.forward(batch, &Selection::full(&elastic.config)).unwrap());

    // reruns reproduce their artifacts byte for byte
    let before = fs::read(out.join("eval.csv")).unwrap();
    let ck = fs::read(out.join("extracted_b1.00.bin")).unwrap();
    run_stage(&cfg, Stage::Eval).unwrap();
    run_stage(&full_cfg, Stage::Extract).unwrap();
    assert_eq!(fs::read(out.join("eval.csv")).unwrap(), before);
    assert_eq!(fs::read(out.join("extracted_b1.00.bin")).unwrap(), ck);

    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(report.starts_with("source,record"));
    assert!(report.contains("fit.csv"));
}

#[test]
fn ingestion_splits_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prose.txt");
    fs::write(&path, "x".repeat(1000)).unwrap();
    let c = ingest_corpus(&[path.clone()], 10, 0.9).unwrap();
    assert_eq!((c.train.len(), c.validation.len()), (90, 10));
    assert_eq!(c.domains, vec!["prose".to_string()]);
    assert_eq!(c.train[0].tokens, vec![120; 10]);
    let again = ingest_corpus(&[path], 10, 0.9).unwrap();
    assert_eq!(c.fingerprint(), again.fingerprint());

    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    assert!(matches!(ingest_corpus(&[empty], 10, 0.9), Err(Error::Ingestion { .. })));
    assert!(ingest_corpus(&[dir.path().join("absent.txt")], 10, 0.9).is_err());
}

#[test]
fn synthetic_splits_are_disjoint_and_seeded() {
    let spec = SynthSpec::default();
    let a = synth_corpus(&Rng::new(3), &spec).unwrap();
    assert_eq!(a, synth_corpus(&Rng::new(3), &spec).unwrap());
    assert_ne!(a.fingerprint(), synth_corpus(&Rng::new(4), &spec).unwrap().fingerprint());
    for d in 0..a.domains.len() {
        let n = a.train.iter().filter(|s| s.domain == d).count() + a.validation_of(d).len();
        assert_eq!(n, 600);
        assert_eq!(a.validation_of(d).len(), 60);
    }
    assert!(a.train.iter().chain(&a.validation).all(|s| s.tokens.len() == spec.seq_len));
    let empty = SynthSpec { domains: vec![], ..SynthSpec::default() };
    assert!(synth_corpus(&Rng::new(0), &empty).is_err());
    let c = Corpus::from_domains(vec![("x".into(), vec![vec![1]; 4])], 1.5);
    assert!(c.is_err());
}
