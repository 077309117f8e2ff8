// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::minigpt::{Component, ModelConfig, ModelState};
use crate::taskgen::{BinOp, Operand, OrderMode, Problem, Split, Step, Template};
use crate::trainer::evaluate;

fn prob(text: &str) -> Problem {
    let n = text.matches(',').count();
    Problem::from_text(text, &(0..n).collect::<Vec<_>>(), OrderMode::Forward, Split::TestId).unwrap()
}

fn model(layers: usize) -> ModelState<f64> {
    ModelState::init(&ModelConfig { max_seq: 32, init_std: 0.3, ..ModelConfig::with_shape(layers, 2, 16) }, 11).unwrap()
}

#[test]
fn compensation_example() {
    let p = prob("a=4+6,d=a+5,c=1+d,c>>?");
    let mut steps = p.template.steps().to_vec();
    steps[0].rhs = Operand::Number(1);
    assert_eq!(compensate(&steps, 1, Slot::Rhs, 15).unwrap(), 10);
    steps[1].rhs = Operand::Number(4);
    assert_eq!(Template::new(steps).unwrap().values()[1], 9);
}

#[test]
fn compensation_is_unique_everywhere() {
    for op in [BinOp::Plus, BinOp::Minus] {
        for var_first in [true, false] {
            for a in 0..23u8 {
                for want in 0..23u8 {
                    let (lhs, rhs, slot) = if var_first {
                        (Operand::Variable(0), Operand::Number(0), Slot::Rhs)
                    } else {
                        (Operand::Number(0), Operand::Variable(0), Slot::Lhs)
                    };
                    let steps = vec![
                        Step { target: 0, lhs: Operand::Number(a), op: BinOp::Plus, rhs: Operand::Number(0) },
                        Step { target: 1, lhs, op, rhs },
                    ];
                    let hits = (0..23u8)
                        .filter(|&n| {
                            let mut s = steps.clone();
                            match slot {
                                Slot::Lhs => s[1].lhs = Operand::Number(n),
                                Slot::Rhs => s[1].rhs = Operand::Number(n),
                            }
                            Template::new(s).unwrap().values()[1] == want
                        })
                        .count();
                    assert_eq!(hits, 1);
                    assert!(compensate(&steps, 1, slot, want).is_ok());
                }
            }
        }
    }
}

#[test]
fn result_pairs() {
    let p = prob("a=4+6,d=a+5,c=1+d,c>>?");
    for seed in 0..50 {
        let fixed = make_pair(
            &p,
            &CorruptionSpec::result(CorruptionKind::ResultFixed, 1),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        assert_eq!(fixed.corrupted.template.values()[1], 15);
        assert_ne!(fixed.corrupted.template.values()[0], 10);
        assert_eq!(fixed.r, fixed.r_prime);
        let varied = make_pair(
            &p,
            &CorruptionSpec::result(CorruptionKind::ResultVaried, 1),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        assert_ne!(varied.corrupted.template.values()[1], 15);
        assert_ne!(varied.r, varied.r_prime);
        // Same first-premise change in both.
        assert_eq!(fixed.corrupted.template.steps()[0], varied.corrupted.template.steps()[0]);
    }
}

#[test]
fn pairs_are_token_aligned() {
    let p = prob("a=4+6,d=5-a,c=d+1,c>>?");
    let specs = [
        (CorruptionSpec::first_operand(), 1),
        (CorruptionSpec::first_operator(), 1),
        (CorruptionSpec { step: 2, ..CorruptionSpec::first_operand() }, 1),
        (CorruptionSpec::result(CorruptionKind::ResultFixed, 2), 2),
    ];
    for (spec, diffs) in specs {
        for seed in 0..20 {
            let pair = make_pair(&p, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let (a, b) = (pair.clean.token_seq().unwrap(), pair.corrupted.token_seq().unwrap());
            assert_eq!(a.prompt().len(), b.prompt().len());
            let n = a.prompt().iter().zip(b.prompt()).filter(|(x, y)| x != y).count();
            assert!(n == diffs || (spec.kind == CorruptionKind::ResultFixed && n == 1), "{spec:?}: {n}");
        }
    }
}

#[test]
fn inapplicable_specs() {
    let p = prob("a=4+6,d=a+5,d>>?");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lhs_var = CorruptionSpec { step: 1, slot: Some(Slot::Lhs), ..CorruptionSpec::first_operand() };
    assert!(matches!(make_pair(&p, &lhs_var, &mut rng), Err(crate::Error::Inapplicable(_))));
    let too_far = CorruptionSpec::result(CorruptionKind::ResultFixed, 2);
    assert!(matches!(make_pair(&p, &too_far, &mut rng), Err(crate::Error::Inapplicable(_))));
}

#[test]
fn identity_patch_grid_is_zero() {
    let m = model(2);
    let problems = [prob("a=4+6,d=a+5,d>>?"), prob("x=1+2,y=x-9,y>>?")];
    let pairs: Vec<PatchPair> = problems
        .iter()
        .map(|p| PatchPair { clean: p.clone(), corrupted: p.clone(), r: p.answer(), r_prime: p.answer() })
        .collect();
    for c in Component::ALL {
        let g = run_grid(&m, &pairs, c, (1, 1), Metric::A).unwrap();
        assert!(g.values.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(g.values.len(), 2);
        assert_eq!(g.seq_len(), 16);
    }
}

#[test]
fn full_window_reproduces_corrupted_run() {
    let m = model(2);
    let base = [prob("a=4+6,d=a+5,d>>?"), prob("x=1+2,y=x-9,y>>?"), prob("q=7-2,r=q+3,r>>?")];
    let pairs = make_pairs(&base, &CorruptionSpec::first_operand(), 3).unwrap();
    let seq = 16;
    let g = run_grid(&m, &pairs, Component::ResidPost, (2, seq), Metric::C).unwrap();
    assert_eq!(g.counts[0][0] + g.dropped.min(pairs.len()), g.counts[0][0].max(pairs.len()));
    assert!((g.values[0][0] - 1.0).abs() < 1e-12, "{}", g.values[0][0]);
    // Metric a at the same anchor equals the recomputed corrupted-run value.
    let a = run_grid(&m, &pairs, Component::ResidPost, (2, seq), Metric::A).unwrap();
    let mut expect = 0.0;
    for p in &pairs {
        let cl = m.forward(p.clean.token_seq().unwrap().prompt(), Default::default()).unwrap();
        let st = m.forward(p.corrupted.token_seq().unwrap().prompt(), Default::default()).unwrap();
        let t = p.r as usize;
        let (c, s) = (cl.row(seq - 1)[t], st.row(seq - 1)[t]);
        expect += (c - s) / c;
    }
    assert!((a.values[0][0] - expect / pairs.len() as f64).abs() < 1e-12);
}

#[test]
fn mixed_lengths_rejected() {
    let m = model(1);
    let a = make_pairs(&[prob("a=4+6,d=a+5,d>>?")], &CorruptionSpec::first_operand(), 0).unwrap();
    let b = make_pairs(&[prob("a=4+6,a>>?")], &CorruptionSpec::first_operand(), 0).unwrap();
    let both = [a[0].clone(), b[0].clone()];
    assert!(matches!(run_grid(&m, &both, Component::AttnOut, (2, 2), Metric::A), Err(crate::Error::Contract(_))));
    assert!(run_grid(&m, &[], Component::AttnOut, (2, 2), Metric::A).is_err());
}

fn synthetic(values: Vec<Vec<f64>>) -> PatchGrid {
    let (l, s) = (values.len(), values[0].len());
    PatchGrid {
        component: Component::ResidPost,
        metric: Metric::A,
        window: (1, 1),
        tokens: vec!["t".into(); s],
        values,
        counts: vec![vec![1; s]; l],
        dropped: 0,
        n: 1,
    }
}

#[test]
fn diagonal_statistics() {
    let uni = diagonal_stats(&synthetic(vec![vec![0.3; 8]; 3]), &[2, 5]);
    assert!((uni.ratio - 1.0).abs() < 1e-12);
    let mut v = vec![vec![0.0; 8]; 3];
    v[0][2] = 1.0;
    v[2][5] = 0.5;
    let s = diagonal_stats(&synthetic(v), &[2, 5]);
    assert_eq!(s.elsewhere_mean, 0.0);
    assert_eq!(s.argmax_layers_per_step, vec![0, 2]);
    assert_eq!(s.nondecreasing_fraction, 1.0);
    let p = prob("a=4+6,d=a+5,d>>?");
    assert_eq!(step_boundaries(p.token_seq().unwrap().prompt()), vec![6, 12, 15]);
}

#[test]
fn fixed_varied_regions() {
    let m = model(2);
    let base = [prob("a=4+6,d=a+5,c=1+d,c>>?"), prob("x=2+3,y=x-1,z=y+8,z>>?")];
    let fv = compare_fixed_varied(&m, &base, 1, Component::ResidPost, (1, 1), Metric::A, 5).unwrap();
    assert_eq!(fv.region_start, 13);
    assert!(fv.fixed_region_mean.is_finite() && fv.varied_region_mean.is_finite());
}

#[test]
fn sweep_with_large_window_matches_unmasked() {
    let m = model(2);
    let ps = [prob("a=4+6,d=a+5,d>>?"), prob("x=1+2,y=x-9,y>>?")];
    let sw = window_sweep(&m, &ps, &[1, 40]).unwrap();
    assert_eq!(sw[1].accuracy, evaluate(&m, &ps, None).unwrap().accuracy);
    assert!(window_sweep(&m, &ps, &[0]).is_err());
}

#[test]
fn grid_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let g = synthetic(vec![vec![0.1, -0.2], vec![0.0, 1.0]]);
    write_grid(&g, dir.path(), "g").unwrap();
    assert_eq!(read_grid(&dir.path().join("g.json")).unwrap(), g);
    let svg = std::fs::read_to_string(dir.path().join("g.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn operand_combinations() {
    let ps = [prob("a=4+6,d=1+a,d>>?"), prob("a=4+6,d=a+1,d>>?"), prob("a=4+6,d=a-1,d>>?"), prob("a=4+6,d=1-a,d>>?")];
    for (i, c) in OperandCombo::ALL.into_iter().enumerate() {
        assert_eq!(filter_combo(&ps, 1, c), vec![ps[i].clone()]);
        assert_eq!(c.as_str().parse::<OperandCombo>().unwrap(), c);
    }
    assert!(filter_combo(&ps, 0, OperandCombo::NumPlusVar).is_empty());
    assert!(filter_combo(&ps, 5, OperandCombo::NumPlusVar).is_empty());
}
