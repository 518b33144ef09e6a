//! End-to-end command flow: every stage reads what the previous one wrote.

use std::fs;
use std::path::Path;
use std::process::Command;

use swbt::cli::{
    cmd_eval, cmd_finetune, cmd_gen_data, cmd_pretrain, cmd_report, cmd_score, cmd_sweep,
};

const CONFIG: &str = "\
[experiment]
seed = 11

[data]
expert_episodes = 2
imperfect_levels = level090
imperfect_episodes = 2

[model]
d_model = 16
n_layers = 1
n_heads = 2
l = 3

[pretrain]
steps = 40
batch_size = 4
lr = 1e-3

[scoring]
beta = 0.5

[finetune]
lambda = 0.1
beta = 0.5
batch_size = 4
steps = 12
lr = 1e-3
eval_every = 6
eval_episodes = 4
eval_seed = 5
";

fn assert_tagged_csv(path: &Path) {
    let text = fs::read_to_string(path).unwrap();
    assert!(
        text.starts_with("# config_hash="),
        "{} lacks a provenance line: {}",
        path.display(),
        &text[..text.len().min(60)]
    );
}

#[test]
fn artifacts_flow_through_every_stage() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path();
    let config = dir.join("tiny.cfg");
    fs::write(&config, CONFIG).unwrap();

    let expert = dir.join("expert.swbtds");
    let imp_a = dir.join("level090.swbtds");
    let imp_b = dir.join("level060.swbtds");
    cmd_gen_data("expert", 4, 1, &expert).unwrap();
    cmd_gen_data("level090", 5, 2, &imp_a).unwrap();
    cmd_gen_data("level060", 3, 3, &imp_b).unwrap();
    let imperfect = vec![imp_a.clone(), imp_b.clone()];

    let pre_dir = dir.join("pre");
    let (ckpt, loss) = cmd_pretrain(&config, &expert, &imperfect, &pre_dir, None).unwrap();
    assert!(loss.is_finite() && loss > 0.0, "pretrain loss {loss}");
    assert!(ckpt.is_file());
    assert_tagged_csv(&pre_dir.join("pretrain_log.csv"));

    let score_dir = dir.join("scores");
    let (rows, kept, beta) =
        cmd_score(&config, &ckpt, &expert, &imperfect, &score_dir).unwrap();
    assert!(rows > 0, "no imperfect segments scored");
    assert!(kept <= rows);
    assert_eq!(beta, 0.5);
    let quality = score_dir.join("quality.csv");
    assert_tagged_csv(&quality);
    assert_tagged_csv(&score_dir.join("quality_histogram.csv"));

    let run1 = dir.join("run1");
    let report1 = cmd_finetune(
        &config,
        &expert,
        &imperfect,
        Some(&quality),
        Some(&ckpt),
        &run1,
        None,
        Some("swbt".to_string()),
    )
    .unwrap();
    assert!((0.0..=1.0).contains(&report1.final_success));
    assert_eq!(report1.label, "swbt");
    for f in [
        "policy.ckpt",
        "eval_log.csv",
        "quality.csv",
        "quality_histogram.csv",
        "report.json",
    ] {
        assert!(run1.join(f).exists(), "missing {f}");
    }
    assert_tagged_csv(&run1.join("eval_log.csv"));

    let rate = cmd_eval(Some(&run1.join("policy.ckpt")), None, 4, 9).unwrap();
    assert!((0.0..=1.0).contains(&rate));

    // A different seed lands in the same report group.
    let run2 = dir.join("run2");
    let report2 = cmd_finetune(
        &config,
        &expert,
        &imperfect,
        Some(&quality),
        Some(&ckpt),
        &run2,
        Some(12),
        Some("swbt".to_string()),
    )
    .unwrap();
    assert_ne!(report1.config_hash, report2.config_hash);
    assert_eq!(report1.group_hash, report2.group_hash);

    // Reruns are byte-identical, metric CSVs included.
    let run3 = dir.join("run3");
    cmd_finetune(
        &config,
        &expert,
        &imperfect,
        Some(&quality),
        Some(&ckpt),
        &run3,
        None,
        Some("swbt".to_string()),
    )
    .unwrap();
    assert_eq!(
        fs::read(run1.join("eval_log.csv")).unwrap(),
        fs::read(run3.join("eval_log.csv")).unwrap(),
        "fine-tuning rerun changed eval_log.csv"
    );
    let score_dir2 = dir.join("scores2");
    cmd_score(&config, &ckpt, &expert, &imperfect, &score_dir2).unwrap();
    assert_eq!(
        fs::read(&quality).unwrap(),
        fs::read(score_dir2.join("quality.csv")).unwrap(),
        "scoring rerun changed quality.csv"
    );

    let report_dir = dir.join("summary");
    let text = cmd_report(
        &[run1.clone(), run2.join("report.json")],
        Some(&report_dir),
    )
    .unwrap();
    assert!(text.contains("2 runs in 1 groups"), "{text}");
    assert!(report_dir.join("report.txt").is_file());
    assert!(report_dir.join("report.csv").is_file());
}

#[test]
fn sweeps_fan_out_into_run_directories() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path();
    let config = dir.join("tiny.cfg");
    fs::write(&config, CONFIG).unwrap();
    let expert = dir.join("expert.swbtds");
    let imp = dir.join("level090.swbtds");
    cmd_gen_data("expert", 3, 1, &expert).unwrap();
    cmd_gen_data("level090", 3, 2, &imp).unwrap();

    let beta_dir = dir.join("beta_sweep");
    let rows = cmd_sweep(
        &config,
        "beta",
        "0.5,0.9",
        &expert,
        std::slice::from_ref(&imp),
        &beta_dir,
    )
    .unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].value, "0.5");
    assert!(
        rows[0].reserved_segments >= rows[1].reserved_segments,
        "raising beta cannot reserve more segments: {rows:?}"
    );
    assert_tagged_csv(&beta_dir.join("sweep_summary.csv"));
    assert!(beta_dir.join("pretrained.ckpt").is_file());
    assert!(beta_dir.join("beta-0.5").join("report.json").is_file());
    assert!(beta_dir.join("beta-0.9").join("report.json").is_file());

    // Ratio sweeps generate their own data and label points value@level.
    let ratio_dir = dir.join("ratio_sweep");
    let rows = cmd_sweep(&config, "ratio", "1:2", &expert, &[], &ratio_dir).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].value, "1:2@level090");
    let point = ratio_dir.join("1-2-level090");
    assert!(point.join("imperfect.swbtds").is_file());
    assert!(point.join("pretrain_log.csv").is_file());
    assert!(point.join("report.json").is_file());

    let err = cmd_sweep(&config, "ratio", "1:2", &expert, &[imp], &ratio_dir)
        .unwrap_err()
        .to_string();
    assert!(err.contains("generate their own"), "{err}");
}

#[test]
fn the_binary_reports_success_and_failure() {
    let exe = env!("CARGO_BIN_EXE_swbt");
    let ok = Command::new(exe)
        .args(["eval", "--level", "expert", "--episodes", "2"])
        .output()
        .unwrap();
    assert!(ok.status.success(), "{ok:?}");
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert!(stdout.contains("success rate"), "{stdout}");

    let bad = Command::new(exe).args(["eval"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&bad.stderr);
    assert!(stderr.starts_with("error:"), "{stderr}");
}
