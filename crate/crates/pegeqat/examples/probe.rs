// scratch difficulty probe for the procedural dataset
use pegeqat::config::{ArchKind, DataName, TrainConfig};
use pegeqat::data::write_synthetic_cifar10;
use pegeqat::estimators::EstimatorKind;
use pegeqat::curriculum::RateFamily;
use pegeqat::train::{train, TrainOptions};

fn main() {
    let dir = std::path::PathBuf::from("/tmp/synth_cifar_probe");
    if !dir.join("test_batch.bin").exists() {
        eprintln!("generating dataset...");
        let t0 = std::time::Instant::now();
        write_synthetic_cifar10(&dir, 50_000, 10_000, 20260810).unwrap();
        eprintln!("generated in {:.1}s", t0.elapsed().as_secs_f64());
    }
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("fp");
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);

    let mut cfg = TrainConfig::default();
    cfg.model.arch = ArchKind::SmallCnn;
    cfg.data.name = DataName::Cifar10;
    cfg.data.dir = dir;
    cfg.data.batch = 64;
    cfg.data.augment = true;
    cfg.data.subset_n = Some(5000);
    cfg.train.epochs = epochs;
    cfg.train.lr = 0.002;
    cfg.train.seed = seed;
    match mode {
        "fp" => { cfg.quant.bits_w = 32; cfg.quant.bits_a = 32; cfg.replace.family = RateFamily::None; cfg.estimator.kind = EstimatorKind::Ste; }
        "ste" => { cfg.estimator.kind = EstimatorKind::Ste; cfg.replace.family = RateFamily::None; }
        "ewgs" => { cfg.estimator.kind = EstimatorKind::Ewgs; cfg.replace.family = RateFamily::None; }
        "pege" => { cfg.estimator.kind = EstimatorKind::Pege; cfg.replace.family = RateFamily::Logarithmic; }
        "pege_none" => { cfg.estimator.kind = EstimatorKind::Pege; cfg.replace.family = RateFamily::None; }
        _ => panic!("mode?"),
    }
    let t0 = std::time::Instant::now();
    let out = train(&cfg, &TrainOptions { prefetch: true, verbose: true, ..Default::default() }).unwrap();
    eprintln!("mode {mode} seed {seed}: final {:.2}% best {:.2}% in {:.0}s", out.final_test_acc, out.best_test_acc, t0.elapsed().as_secs_f64());
}
