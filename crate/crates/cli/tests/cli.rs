use std::path::Path;
use std::process::{Command, Output};

const HEADER: &str = "sweep_axis,sweep_value,scheme,mean_objective,stderr,feasibility_prob,trials";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_covert-alloc"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn noncausal_power_prints_one_row_per_cell_and_scheme() {
    let o = run(&[
        "noncausal-power",
        "--sweep",
        "p0_db=0,10",
        "--trials",
        "30",
        "--seed",
        "3",
    ]);
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], HEADER);
    assert_eq!(lines.len(), 1 + 2 * 3);
    assert!(lines[1].starts_with("p0_db,0,proposed,"));
    assert!(lines.iter().skip(1).all(|l| l.ends_with(",30")));
}

#[test]
fn same_seed_gives_identical_bytes() {
    let args = [
        "noncausal-rate",
        "--sweep",
        "r0=1,3",
        "--trials",
        "25",
        "--seed",
        "11",
    ];
    let a = stdout(&run(&args));
    let b = stdout(&run(&args));
    assert_eq!(a, b);
    let c = stdout(&run(&[
        "noncausal-rate",
        "--sweep",
        "r0=1,3",
        "--trials",
        "25",
        "--seed",
        "12",
    ]));
    assert_ne!(a, c);
}

#[test]
fn out_flag_writes_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rows.csv");
    let o = run(&[
        "noncausal-power",
        "--schemes",
        "trivial,convex",
        "--trials",
        "5",
        "--sweep",
        "eps_db=-5,0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 2);
    assert!(text.contains("eps_db,-5,trivial,"));
}

#[test]
fn config_file_drives_the_sweep_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "exp.toml",
        r#"
mode = "noncausal_power"
trials = 8
schemes = ["proposed"]
[channel]
num_blocks = 4
seed = 5
[sweep]
axis = "snr_g_db"
values = [0.0, 5.0, 10.0]
"#,
    );
    let text = stdout(&run(&["sweep", "--config", &cfg]));
    assert_eq!(text.lines().count(), 4);
    assert!(text.contains("snr_g_db,10,proposed,"));
}

#[test]
fn configuration_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", "trials = 0\n");
    for args in [
        vec!["noncausal-power", "--config", bad.as_str()],
        vec!["noncausal-power", "--schemes", "magic"],
        vec!["noncausal-power", "--sweep", "r0=1"],
        vec![
            "causal-power",
            "--checkpoint",
            "/no/such/file.ckpt",
            "--trials",
            "1",
        ],
        vec!["sweep"],
        vec!["train-ddqn"],
    ] {
        let o = run(&args);
        assert!(!o.status.success(), "{args:?} should fail");
        assert!(
            String::from_utf8_lossy(&o.stderr).contains("error"),
            "{args:?}"
        );
    }
}

#[test]
fn mode_mismatch_between_config_and_subcommand_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "m.toml", "mode = \"noncausal_rate\"\n");
    assert!(!run(&["noncausal-power", "--config", &cfg]).status.success());
}

#[test]
fn train_then_evaluate_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "train.toml",
        r#"
[train]
episodes = 60
n_tr = 20
n_b = 16
eval_channels = 4
hidden = [16, 16]
action_levels = 16
"#,
    );
    let ck = dir.path().join("net.ckpt");
    let curves = dir.path().join("curves.csv");
    let o = run(&[
        "train-ddqn",
        "--config",
        &cfg,
        "--seed",
        "9",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        curves.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let curve_text = std::fs::read_to_string(&curves).unwrap();
    assert_eq!(curve_text.lines().next(), Some("episode,loss,eval_rate,xi"));
    assert_eq!(curve_text.lines().count(), 61);

    let text = stdout(&run(&[
        "causal-power",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--schemes",
        "ddqn,average,trivial,proposed",
        "--trials",
        "20",
    ]));
    assert_eq!(text.lines().count(), 5);
    assert!(text.contains(",ddqn,"));

    // the network was trained for a different budget
    let o = run(&[
        "causal-power",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--sweep",
        "p0_db=8",
        "--trials",
        "2",
    ]);
    assert!(!o.status.success());

    let text = stdout(&run(&[
        "causal-rate",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--sweep",
        "r0=1,2",
        "--trials",
        "20",
    ]));
    assert_eq!(text.lines().count(), 1 + 2 * 3);
}
