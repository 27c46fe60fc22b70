//! Full-chain checks: generate, protect, verify equivalence, attack,
//! and confirm the bypass verdict for every scheme.

use rpkg::attack::{bypass_pipeline, PipelineCtx, Strategy, SENTINEL};
use rpkg::bundle::KeyPair;
use rpkg::harness::{gen_corpus, run_equivalence, tamper, CorpusSpec};
use rpkg::protect::{protect, Scheme, SchemeConfig};
use rpkg::vm::{run, CrashCode, HookTable, RunLimits, Termination};

fn small_spec() -> CorpusSpec {
    CorpusSpec { n_programs: 2, suite_size: 30, ..CorpusSpec::default() }
}

#[test]
fn protection_preserves_semantics_for_every_scheme() {
    let spec = small_spec();
    let corpus = gen_corpus(&spec).unwrap();
    let dev = spec.dev_key();
    for scheme in Scheme::ALL {
        for (idx, item) in corpus.iter().enumerate() {
            let config = SchemeConfig::new(scheme, spec.seed ^ (idx as u64 + 7));
            let (protected, _) = protect(&item.bundle, &config, &dev).unwrap();
            let v = run_equivalence(&item.bundle, &protected, &item.suite, &[]);
            assert!(
                v.equal,
                "{} broke program {idx}: {:?}",
                scheme.name(),
                v.first_divergence
            );
        }
    }
}

#[test]
fn primary_pipeline_bypasses_every_scheme() {
    let spec = small_spec();
    let corpus = gen_corpus(&spec).unwrap();
    let dev = spec.dev_key();
    let attacker = KeyPair::from_seed_u64(999);
    for scheme in Scheme::ALL {
        let strategy = Strategy::for_scheme(scheme);
        for (idx, item) in corpus.iter().enumerate() {
            let config = SchemeConfig::new(scheme, spec.seed ^ (idx as u64 + 7));
            let (protected, report) = protect(&item.bundle, &config, &dev).unwrap();
            let ctx = PipelineCtx {
                suite: &item.suite,
                seed: 5,
                attacker_key: &attacker,
                report: Some(&report),
            };
            let (attacked, verdict) = bypass_pipeline(&protected, strategy, &ctx).unwrap();
            assert!(
                verdict.bypass_success,
                "{} not bypassed on program {idx}: equivalent={} divergence={:?} notes={:?}",
                strategy.name(),
                verdict.equivalent,
                verdict.first_divergence,
                verdict.notes
            );
            assert!(verdict.secrets_sound);
            // The injected payload really runs.
            let r = run(&attacked, &item.suite[0], 5, RunLimits::default(), &mut HookTable::default())
                .unwrap();
            assert!(r.outputs.contains(&SENTINEL));
        }
    }
}

#[test]
fn nested_bombdroid_and_nrp_redirect_also_bypass() {
    let spec = small_spec();
    let item = &gen_corpus(&spec).unwrap()[0];
    let dev = spec.dev_key();
    let attacker = KeyPair::from_seed_u64(999);

    let mut config = SchemeConfig::new(Scheme::Bombdroid, 11);
    config.nesting_depth = 3;
    let (protected, report) = protect(&item.bundle, &config, &dev).unwrap();
    let ctx = PipelineCtx {
        suite: &item.suite,
        seed: 5,
        attacker_key: &attacker,
        report: Some(&report),
    };
    let (_, verdict) =
        bypass_pipeline(&protected, Strategy::BombdroidBruteForce, &ctx).unwrap();
    assert!(verdict.bypass_success, "{:?}", verdict.first_divergence);

    let config = SchemeConfig::new(Scheme::Nrp, 11);
    let (protected, report) = protect(&item.bundle, &config, &dev).unwrap();
    let ctx = PipelineCtx {
        suite: &item.suite,
        seed: 5,
        attacker_key: &attacker,
        report: Some(&report),
    };
    let (_, verdict) = bypass_pipeline(&protected, Strategy::NrpRedirect, &ctx).unwrap();
    assert!(verdict.bypass_success, "{:?}", verdict.first_divergence);
}

#[test]
fn naive_repackaging_is_detected_by_every_scheme() {
    let spec = CorpusSpec { n_programs: 1, suite_size: 60, ..CorpusSpec::default() };
    let item = &gen_corpus(&spec).unwrap()[0];
    let dev = spec.dev_key();
    let attacker = KeyPair::from_seed_u64(999);
    for scheme in Scheme::ALL {
        let config = SchemeConfig::new(scheme, 13);
        let (protected, _) = protect(&item.bundle, &config, &dev).unwrap();
        let tampered = tamper(&protected, scheme, &attacker).unwrap();
        let mut detected = false;
        for (i, inputs) in item.suite.iter().enumerate() {
            let r = run(&tampered, inputs, i as u64, RunLimits::default(), &mut HookTable::default())
                .unwrap();
            if let Termination::Crashed(c) = r.termination {
                if c.is_tamper_response() {
                    detected = true;
                    break;
                }
            }
        }
        assert!(detected, "{} missed the tamper", scheme.name());
        let _ = CrashCode::TamperDetected;
    }
}
