//! Black-box tests of the `drift` binary: exit codes, artifact layout, and
//! the gen -> triangulate -> eval pipeline on files alone.

use std::path::Path;
use std::process::{Command, Output};

fn drift(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drift"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_status(out: &Output, want: i32, context: &str) {
    let got = out.status.code().expect("no signal");
    assert_eq!(
        got,
        want,
        "{context}: exit {got}, expected {want}\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn record_value(path: &Path, key: &str) -> f64 {
    let text = std::fs::read_to_string(path).unwrap();
    for line in text.lines() {
        if let Some(v) = line.strip_prefix(&format!("{key}=")) {
            return v.parse().unwrap();
        }
    }
    panic!("{key} not found in {path:?}:\n{text}");
}

const STATIC_SCENE: &str = "[scene]\nkind = \"static_two_plane\"\nheight = 64\nwidth = 96\n";

#[test]
fn pipeline_recovers_exact_depth_from_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("scene.toml"), STATIC_SCENE).unwrap();
    let out = drift(dir, &["gen", "--config", "scene.toml", "--out", "data"]);
    assert_status(&out, 0, "gen");
    // triangulate consumes the emitted flow file, not the renderer
    let tri_cfg = format!("{STATIC_SCENE}\n[inputs]\nflow_fwd = \"data/flow_fwd.drft\"\n");
    std::fs::write(dir.join("tri.toml"), tri_cfg).unwrap();
    let out = drift(dir, &["triangulate", "--config", "tri.toml", "--out", "tri"]);
    assert_status(&out, 0, "triangulate");
    assert!(record_value(&dir.join("tri/triangulate.txt"), "valid_fraction") >= 0.99);
    let eval_cfg = "[inputs]\npred_depth = \"tri/depth_tri.drft\"\ngt_depth = \"data/depth_t.drft\"\n";
    std::fs::write(dir.join("eval.toml"), eval_cfg).unwrap();
    let out = drift(dir, &["eval", "--config", "eval.toml", "--out", "ev"]);
    assert_status(&out, 0, "eval");
    let abs_rel = record_value(&dir.join("ev/metrics_depth.txt"), "abs_rel");
    assert!(abs_rel < 1e-6, "pipeline AbsRel {abs_rel}");
}

#[test]
fn png_pipeline_stays_within_quantization() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("scene.toml"), STATIC_SCENE).unwrap();
    let out = drift(
        dir,
        &["gen", "--config", "scene.toml", "--out", "data", "--format", "png"],
    );
    assert_status(&out, 0, "gen png");
    let tri_cfg = format!("{STATIC_SCENE}\n[inputs]\nflow_fwd = \"data/flow_fwd.png\"\n");
    std::fs::write(dir.join("tri.toml"), tri_cfg).unwrap();
    let out = drift(dir, &["triangulate", "--config", "tri.toml", "--out", "tri"]);
    assert_status(&out, 0, "triangulate from png");
    let eval_cfg = "[inputs]\npred_depth = \"tri/depth_tri.drft\"\ngt_depth = \"data/depth_t.png\"\n";
    std::fs::write(dir.join("eval.toml"), eval_cfg).unwrap();
    let out = drift(dir, &["eval", "--config", "eval.toml", "--out", "ev"]);
    assert_status(&out, 0, "eval png");
    // 1/64 px flow quantization and 1/256 m depth quantization leave a
    // small but nonzero error
    let abs_rel = record_value(&dir.join("ev/metrics_depth.txt"), "abs_rel");
    assert!(abs_rel < 0.01, "png pipeline AbsRel {abs_rel}");
}

#[test]
fn selftest_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = drift(tmp.path(), &["selftest"]);
    assert_status(&out, 0, "selftest");
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("0 failed"), "unexpected output:\n{text}");
    assert!(!text.contains("FAIL"), "unexpected output:\n{text}");
}

#[test]
fn seeded_optimize_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = "[scene]\nkind = \"static_two_plane\"\nheight = 32\nwidth = 48\n\n\
               [optimizer]\nmax_iterations = 50\ninit = \"constant\"\n\
               init_fill_depth = 6.0\noptimize_scene_flow = false\n";
    std::fs::write(dir.join("opt.toml"), cfg).unwrap();
    for out_dir in ["a", "b"] {
        let out = drift(
            dir,
            &["optimize", "--config", "opt.toml", "--seed", "7", "--out", out_dir],
        );
        assert_status(&out, 0, "optimize");
    }
    let trace_a = std::fs::read(dir.join("a/trace.csv")).unwrap();
    let trace_b = std::fs::read(dir.join("b/trace.csv")).unwrap();
    assert!(!trace_a.is_empty());
    assert_eq!(trace_a, trace_b, "trace files differ between seeded reruns");
    let sum_a = std::fs::read(dir.join("a/optimize.txt")).unwrap();
    let sum_b = std::fs::read(dir.join("b/optimize.txt")).unwrap();
    assert_eq!(sum_a, sum_b);
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = drift(dir, &["gen", "--bogus"]);
    assert_status(&out, 1, "unknown flag");
    assert!(
        String::from_utf8_lossy(&out.stderr).to_lowercase().contains("usage"),
        "no usage text on unknown flag"
    );
    let out = drift(dir, &["frobnicate"]);
    assert_status(&out, 1, "unknown subcommand");
    let out = drift(dir, &[] as &[&str]);
    assert_status(&out, 1, "no subcommand");
}

#[test]
fn config_and_io_errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    // unknown key: validation error
    std::fs::write(dir.join("typo.toml"), "[weights]\nlambda_depht = 3.0\n").unwrap();
    let out = drift(dir, &["losses", "--config", "typo.toml"]);
    assert_status(&out, 1, "unknown config key");
    // absent config file: I/O error
    let out = drift(dir, &["losses", "--config", "nope.toml"]);
    assert_status(&out, 2, "missing config file");
    // a text file is not a tensor: format error
    std::fs::write(dir.join("scene.toml"), STATIC_SCENE).unwrap();
    std::fs::write(dir.join("garbage.drft"), "not a tensor").unwrap();
    let cfg = "[inputs]\npred_depth = \"garbage.drft\"\ngt_depth = \"garbage.drft\"\n";
    std::fs::write(dir.join("bad_eval.toml"), cfg).unwrap();
    let out = drift(dir, &["eval", "--config", "bad_eval.toml"]);
    assert_status(&out, 2, "malformed tensor");
    // nothing to evaluate: validation error
    std::fs::write(dir.join("empty.toml"), "").unwrap();
    let out = drift(dir, &["eval", "--config", "empty.toml"]);
    assert_status(&out, 1, "eval without inputs");
    // no scene and no files: validation error
    let out = drift(dir, &["gen", "--config", "empty.toml"]);
    assert_status(&out, 1, "gen without scene");
}

#[test]
fn masks_and_losses_commands_emit_records() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let moving = "[scene]\nkind = \"one_moving_plane\"\nheight = 48\nwidth = 64\n";
    std::fs::write(dir.join("scene.toml"), moving).unwrap();
    let out = drift(dir, &["masks", "--config", "scene.toml", "--out", "mk"]);
    assert_status(&out, 0, "masks");
    assert!(record_value(&dir.join("mk/masks.txt"), "iou_vs_analytic") >= 0.9);
    // with GT state and co-visibility masking the consistency terms vanish
    let losses_cfg = format!(
        "{moving}\n[terms]\nphoto_mot = false\nsmoothness = false\n\
         opt_mot = true\nrev_opt = true\nrev_mot = true\n"
    );
    std::fs::write(dir.join("losses.toml"), losses_cfg).unwrap();
    let out = drift(dir, &["losses", "--config", "losses.toml", "--out", "ls"]);
    assert_status(&out, 0, "losses");
    for key in ["opt_mot", "rev_opt", "rev_mot"] {
        let v = record_value(&dir.join("ls/losses.txt"), key);
        assert!(v < 1e-6, "{key} = {v} on ground truth");
    }
}
