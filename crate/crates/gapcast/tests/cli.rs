//! Exit-code and error-surface checks of the command dispatcher.

use gapcast::run_from;

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(run_from(["gapcast", "frobnicate"]), 2);
    assert_eq!(run_from(["gapcast", "bench", "--no-such-flag"]), 2);
}

#[test]
fn help_is_a_successful_exit() {
    assert_eq!(run_from(["gapcast", "--help"]), 0);
}

#[test]
fn predict_with_unknown_route_names_the_route() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("scene.toml");
    std::fs::write(
        &scenario,
        "[[vehicle]]\nid = 1\nroute = \"no_such_route\"\ns = 10.0\nv = 5.0\n",
    )
    .unwrap();
    // A gap weight file is needed before the scenario even parses; create a
    // valid one by training nothing and saving a fresh net.
    use gapcast::gap::GapModel;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let model = GapModel::new(&mut rng).unwrap();
    let weights = dir.path().join("gap.weights");
    gapcast::mlp::save_weights(&model.net, &weights).unwrap();

    let out = dir.path().join("pred.csv");
    let code = run_from([
        "gapcast",
        "predict",
        "--scenario",
        scenario.to_str().unwrap(),
        "--gap",
        weights.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--log",
        dir.path().join("runs.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(code, 1, "domain errors exit 1");
}

#[test]
fn missing_weight_file_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let code = run_from([
        "gapcast",
        "eval",
        "--gap",
        dir.path().join("nope.weights").to_str().unwrap(),
        "--labels",
        dir.path().join("nope.csv").to_str().unwrap(),
        "--log",
        dir.path().join("runs.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
}

#[test]
fn eval_without_inputs_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    use gapcast::gap::GapModel;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let model = GapModel::new(&mut rng).unwrap();
    let weights = dir.path().join("gap.weights");
    gapcast::mlp::save_weights(&model.net, &weights).unwrap();
    let code = run_from([
        "gapcast",
        "eval",
        "--gap",
        weights.to_str().unwrap(),
        "--log",
        dir.path().join("runs.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
}
