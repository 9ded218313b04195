use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn edmae(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edmae"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen_small(dir: &Path) {
    let o = edmae(&["gen-data", "--count", "24", "--out", "d", "--seed", "5"], dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_reprints_the_finetune_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_small(dir);
    let common = ["--train", "d/synth_train.tsv", "--test", "d/synth_test.tsv", "--random-init", "--epochs", "1"];

    let cls = edmae(&[&["finetune-cls", "--out", "c"][..], &common].concat(), dir);
    assert!(cls.status.success(), "{}", String::from_utf8_lossy(&cls.stderr));
    let ev = edmae(&["eval", "--checkpoint", "c/classifier.edmk", "--data", "d/synth_test.tsv"], dir);
    assert_eq!(stdout(&ev), stdout(&cls));

    let seg = edmae(&[&["finetune-seg", "--out", "s", "--loss", "ce"][..], &common].concat(), dir);
    assert!(seg.status.success(), "{}", String::from_utf8_lossy(&seg.stderr));
    let ev = edmae(
        &["eval", "--checkpoint", "s/segmenter.edmk", "--data", "d/synth_test.tsv", "--out", "e"],
        dir,
    );
    assert_eq!(stdout(&ev), stdout(&seg));
    assert_eq!(fs::read(dir.join("e/eval_metrics.csv")).unwrap(), fs::read(dir.join("s/metrics.csv")).unwrap());
}

#[test]
fn bad_configuration_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("bad.cfg"), "lr=1e-3\nwarmup_epochs=5\n").unwrap();
    let o = edmae(&["gen-data", "--config", "bad.cfg", "--out", "x"], dir);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warmup_epochs"));

    let o = edmae(&["gen-data", "--mask-ratio", "1.5", "--out", "x"], dir);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_suggests_pretraining() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_small(dir);
    let o = edmae(
        &["finetune-cls", "--train", "d/synth_train.tsv", "--test", "d/synth_test.tsv", "--checkpoint", "nope.edmk"],
        dir,
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--random-init"));
}

#[test]
fn flags_override_config_file_and_set() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_small(dir);
    fs::write(dir.join("run.cfg"), "epochs=7\nmask_ratio=0.5\nmomentum=0.9\n").unwrap();
    let o = edmae(
        &[
            "pretrain", "--data", "d/synth_train.tsv", "--out", "p", "--config", "run.cfg", "--set", "epochs=1", "--set",
            "momentum=0.95", "--mask-ratio", "0.6", "--set", "mask_ratio=0.4",
        ],
        dir,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let written = fs::read_to_string(dir.join("p/config.txt")).unwrap();
    for line in ["epochs=1", "mask_ratio=0.6", "momentum=0.95"] {
        assert!(written.lines().any(|l| l == line), "{line} missing from\n{written}");
    }
    let curve = fs::read_to_string(dir.join("p/pretrain_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 2);
    assert!(curve.starts_with("epoch,step,align_loss,recon_loss,total_loss,lr\n"));
}

#[test]
fn gradcheck_reports_an_injected_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = edmae(&["gradcheck", "--seeds", "2"], tmp.path());
    assert!(ok.status.success());
    let bad = edmae(&["gradcheck", "--seeds", "2", "--inject-fault", "avg_pool2"], tmp.path());
    assert_eq!(bad.status.code(), Some(1));
    let line = stdout(&bad).lines().find(|l| l.starts_with("avg_pool2")).unwrap().to_string();
    assert!(line.ends_with("FAIL"), "{line}");
}

#[test]
fn commands_leave_inputs_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_small(dir);
    let snapshot = || {
        let mut files: Vec<_> = fs::read_dir(dir.join("d"))
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.clone(), fs::read(p).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    let before = snapshot();
    let o = edmae(&["pretrain", "--data", "d/synth_train.tsv", "--out", "p", "--epochs", "1"], dir);
    assert!(o.status.success());
    assert_eq!(snapshot(), before);
}
