// SPDX-License-Identifier: MIT OR Apache-2.0

use clap::{CommandFactory, Parser};
use serde_json::json;

use super::commands::{parse_range_list, EvalSettings, GenSettings, PatchSettings, SweepSettings, TrainSettings};
use super::*;

fn parse(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("stepwise").chain(args.iter().copied())).unwrap()
}

#[test]
fn clap_definition_is_consistent() {
    Cli::command().debug_assert();
}

#[test]
fn flatten_round_trips() {
    let v = json!({"a": 1, "model": {"d_model": 64, "n_heads": 2}, "xs": [1, 2]});
    let flat = flatten(&v);
    assert_eq!(flat.keys().collect::<Vec<_>>(), ["a", "model.d_model", "model.n_heads", "xs"]);
    assert_eq!(unflatten(&flat), v);
    assert_eq!(flag_name("model.d_model"), "--model-d-model");
}

#[test]
fn every_settings_key_has_its_flag() {
    let cases: Vec<(&str, Value)> = vec![
        ("gen", serde_json::to_value(GenSettings::default()).unwrap()),
        ("patch", serde_json::to_value(PatchSettings::default()).unwrap()),
        ("train", serde_json::to_value(TrainSettings::preset("desk").unwrap()).unwrap()),
        ("eval", serde_json::to_value(EvalSettings::default()).unwrap()),
        ("sweep", serde_json::to_value(SweepSettings::default()).unwrap()),
        ("probe", serde_json::to_value(crate::llmprobe::ProbeConfig::default()).unwrap()),
    ];
    for (sub, v) in cases {
        let cmd = Cli::command();
        let sc = cmd.find_subcommand(sub).unwrap();
        let longs: Vec<String> = sc.get_arguments().filter_map(|a| a.get_long()).map(|l| format!("--{l}")).collect();
        for key in flatten(&v).keys() {
            assert!(longs.contains(&flag_name(key)), "{sub}: no flag for `{key}`");
        }
    }
}

#[test]
fn flags_override_file_and_unknown_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.json");
    std::fs::write(&file, r#"{"k": 5, "seed": 3, "templates_per_length": 10}"#).unwrap();
    let Command::Gen(f) = parse(&["gen", "--out", "x", "--seed", "9", "--orders", "forward,reverse"]).command else {
        unreachable!()
    };
    let (s, flat): (GenSettings, Flat) = settings(&GenSettings::default(), Some(&file), &f).unwrap();
    assert_eq!((s.k, s.seed, s.templates_per_length), (5, 9, 10));
    assert_eq!(s.orders, vec![OrderMode::Forward, OrderMode::Reverse]);
    assert_eq!(flat["seed"], json!(9));

    std::fs::write(&file, r#"{"bogus": 1}"#).unwrap();
    let err = settings(&GenSettings::default(), Some(&file), &f).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("bogus"));
}

#[test]
fn unknown_flags_are_usage_errors() {
    let e = Cli::try_parse_from(["stepwise", "gen", "--out", "x", "--nope", "1"]).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    let e = Cli::try_parse_from(["stepwise", "patch", "--out", "x", "--metric", "z"]).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn range_lists() {
    assert_eq!(parse_range_list("1..10").unwrap(), (1..=10).collect::<Vec<_>>());
    assert_eq!(parse_range_list("3,6,9").unwrap(), vec![3, 6, 9]);
    assert_eq!(parse_range_list("2..=4").unwrap(), vec![2, 3, 4]);
    assert!(parse_range_list("5..2").is_err());
    assert!(parse_range_list("a").is_err());
}

#[test]
fn patch_defaults_match_the_reference_configuration() {
    let Command::Patch(f) = parse(&[
        "patch",
        "--out",
        "x",
        "--component",
        "resid_post",
        "--metric",
        "a",
        "--window",
        "2x2",
        "--corrupt",
        "first_operand",
    ])
    .command
    else {
        unreachable!()
    };
    let (s, _): (PatchSettings, Flat) = settings(&PatchSettings::default(), None, &f).unwrap();
    let d = PatchSettings::default();
    assert_eq!((s.window, s.metric, s.component, s.n_pairs), (d.window, d.metric, d.component, 100));
}
