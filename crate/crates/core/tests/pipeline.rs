use cbfcert::dynamics::simulate;
use cbfcert::model::{ModelFile, SystemSpec};
use cbfcert::neural::FnBarrier;
use cbfcert::probabilistic::{verify_probabilistic, ProbConfig};
use cbfcert::synthesis::{train, SynthConfig};
use cbfcert::verifier::{verify, Verdict, VerifyConfig};
use cbfcert::{AxisBox, Barrier, BenchmarkSystem, ClosedLoop, LinearMap};

fn quadratic() -> impl Barrier {
    FnBarrier {
        dim: 2,
        value: |x: &[f64]| x[0] * x[0] + x[1] * x[1] - 1.0,
        gradient: |x: &[f64]| vec![2.0 * x[0], 2.0 * x[1]],
        lipschitz: Some(2.0 * 2.5 * 2f64.sqrt()),
    }
}

fn contracting_cfg() -> VerifyConfig {
    VerifyConfig {
        alpha: 0.5,
        alpha_bar: 1.0,
        delta: 0.05,
        bounds: AxisBox::cube(2, 2.5),
        ..VerifyConfig::default()
    }
}

fn tiny_synth() -> SynthConfig {
    SynthConfig {
        samples: 400,
        warm_start_steps: 100,
        steps: 300,
        log_every: 50,
        seed: 11,
        ..SynthConfig::default()
    }
}

#[test]
fn deterministic_and_probabilistic_paths_agree_on_a_contraction() {
    let map = LinearMap::scaled_identity(2, 0.5);
    let h = quadratic();
    let cfg = contracting_cfg();
    let det = verify(&map, &h, &cfg).unwrap();
    assert_eq!(det.verdict, Verdict::Certified);
    assert_eq!(det.n_failures, 0);

    let prob = ProbConfig {
        theta: 0.05,
        volume_samples: 20_000,
    };
    let p = verify_probabilistic(&map, &h, &cfg, &prob).unwrap();
    assert_eq!(p.verdict, Verdict::Certified);
    assert_eq!(p.schedule, det.schedule);
}

#[test]
fn certified_level_is_forward_invariant() {
    let map = LinearMap::scaled_identity(2, 0.5);
    let h = quadratic();
    let report = verify(&map, &h, &contracting_cfg()).unwrap();
    assert_eq!(report.verdict, Verdict::Certified);
    for k in 0..32 {
        let th = k as f64 * std::f64::consts::TAU / 32.0;
        let r = (1.0 + report.gamma_hat).max(0.0).sqrt();
        for x in simulate(&map, &[r * th.cos(), r * th.sin()], 50) {
            assert!(h.value(&x) <= report.gamma_hat + 1e-12);
        }
    }
}

#[test]
fn training_reduces_the_loss() {
    let sys = BenchmarkSystem::default();
    let out = train(&sys, &tiny_synth()).unwrap();
    let first = out.log.iter().find(|e| e.stage == 2).unwrap().loss;
    let last = out.log.last().unwrap().loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn saved_model_reproduces_its_verification() {
    let sys = BenchmarkSystem::default();
    let out = train(&sys, &tiny_synth()).unwrap();
    let model = ModelFile::new(SystemSpec::benchmark(sys.dynamics.dt), out.barrier, out.controller).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.save(&path).unwrap();
    let loaded = ModelFile::load(&path).unwrap();
    assert_eq!(loaded, model);

    let cfg = VerifyConfig {
        alpha_bar: 0.8,
        delta: 0.05,
        schedule: cbfcert::verifier::ScheduleMode::Uniform,
        q: 2,
        ..VerifyConfig::default()
    };
    let run = |m: &ModelFile| {
        let system = m.system.build().unwrap();
        let cl = ClosedLoop::new(&system.dynamics, &m.controller).unwrap();
        let mut r = verify(&cl, &m.barrier, &cfg).unwrap();
        r.wall_time_s = 0.0;
        r
    };
    assert_eq!(run(&model), run(&loaded));
}
