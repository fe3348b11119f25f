use std::path::Path;
use std::process::{Command, Output};

use isorec::load_volume;

fn isorec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isorec"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn setup(dir: &Path) {
    std::fs::write(
        dir.join("sim.toml"),
        "patch = 16\npatch_count = 32\n[phantom]\ndims = [16, 16, 16]\n",
    )
    .unwrap();
    std::fs::write(
        dir.join("prior.toml"),
        "data = \"b\"\nvalidation_count = 4\n[model]\nbase_width = 4\n[train]\nsteps = 10\nbatch_size = 2\nlog_every = 5\n",
    )
    .unwrap();
    assert_eq!(
        code(&isorec(
            dir,
            &["simulate", "--config", "sim.toml", "--out", "b"]
        )),
        0
    );
    assert_eq!(
        code(&isorec(
            dir,
            &["train-prior", "--config", "prior.toml", "--out", "p"]
        )),
        0
    );
}

fn recon_toml(dir: &Path, name: &str, extra: &str) {
    let text = format!(
        "measurements = \"b/aniso.volume\"\nprior = \"p/prior.ckpt\"\n[inr]\nwidth = 16\n[sds]\nepochs = 2\nbatch_slices = 4\n{extra}"
    );
    std::fs::write(dir.join(name), text).unwrap();
}

#[test]
fn full_pipeline_contracts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let entries: Vec<_> = std::fs::read_dir(dir.join("b")).unwrap().collect();
    assert_eq!(entries.len(), 4);
    let loss = std::fs::read_to_string(dir.join("p/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 2);

    recon_toml(dir, "r.toml", "");
    let o = isorec(dir, &["reconstruct", "--config", "r.toml", "--out", "r"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let vol = load_volume(dir.join("r/recon.volume")).unwrap();
    assert_eq!(vol.dims(), [16, 16, 16]);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("r/manifest.json")).unwrap()).unwrap();
    let prior_hash = isorec::io::hash_path(&dir.join("p/prior.ckpt")).unwrap();
    assert_eq!(manifest["inputs"]["prior"], prior_hash);
    assert_eq!(
        manifest["summary"]["prior_weights_before"],
        manifest["summary"]["prior_weights_after"]
    );

    let o = isorec(dir, &["evaluate", "r/recon.volume", "b/gt.volume", "e"]);
    assert_eq!(code(&o), 0);
    let table = String::from_utf8_lossy(&o.stdout);
    for fam in ["ZX", "ZY", "XY"] {
        assert!(table.contains(fam));
    }
    let csv = std::fs::read_to_string(dir.join("e/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 16 * 3);

    let o = isorec(dir, &["evaluate", "b/gt.volume", "b/gt.volume", "same"]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(dir.join("same/metrics.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",inf,1.000000000")));

    let o = isorec(
        dir,
        &[
            "sample-prior",
            "--checkpoint",
            "p/prior.ckpt",
            "--n",
            "3",
            "--size",
            "16",
            "--out",
            "s",
        ],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(
        load_volume(dir.join("s/samples.volume")).unwrap().dims()[0],
        3
    );
}

#[test]
fn resume_continues_from_latest_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    recon_toml(dir, "r.toml", "checkpoint_every = 1\n");
    assert_eq!(
        code(&isorec(
            dir,
            &["reconstruct", "--config", "r.toml", "--out", "full"]
        )),
        0
    );
    // interrupted run: keep only what existed after the first epoch
    assert_eq!(
        code(&isorec(
            dir,
            &["reconstruct", "--config", "r.toml", "--out", "part"]
        )),
        0
    );
    for f in ["recon.volume", "final.ckpt", "manifest.json"] {
        let p = dir.join("part").join(f);
        if p.is_dir() {
            std::fs::remove_dir_all(p).unwrap();
        } else {
            std::fs::remove_file(p).unwrap();
        }
    }
    let text = std::fs::read_to_string(dir.join("r.toml")).unwrap();
    std::fs::write(
        dir.join("resume.toml"),
        text.replace("[inr]", "resume = true\n[inr]"),
    )
    .unwrap();
    let o = isorec(
        dir,
        &["reconstruct", "--config", "resume.toml", "--out", "part"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("resuming at iteration"));
    let a = load_volume(dir.join("full/recon.volume")).unwrap();
    let b = load_volume(dir.join("part/recon.volume")).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn usage_and_config_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&isorec(dir, &["frobnicate"])), 1);
    assert_eq!(code(&isorec(dir, &["--help"])), 0);
    assert_eq!(code(&isorec(dir, &["--version"])), 0);
    std::fs::write(dir.join("bad.toml"), "no_such_field = 3\n").unwrap();
    assert_eq!(
        code(&isorec(
            dir,
            &["simulate", "--config", "bad.toml", "--out", "x"]
        )),
        1
    );
    setup(dir);
    let o = isorec(
        dir,
        &[
            "sample-prior",
            "--checkpoint",
            "p/prior.ckpt",
            "--n",
            "0",
            "--out",
            "s",
        ],
    );
    assert_eq!(code(&o), 1);
    assert!(!dir.join("s").exists());

    recon_toml(dir, "late.toml", "t_start = 5000\n");
    let o = isorec(
        dir,
        &["reconstruct", "--config", "late.toml", "--out", "r1"],
    );
    assert_eq!(code(&o), 1);
    assert!(!dir.join("r1/loss.csv").exists());

    recon_toml(dir, "two.toml", "");
    let text = std::fs::read_to_string(dir.join("two.toml")).unwrap();
    std::fs::write(
        dir.join("two.toml"),
        text.replace("[inr]", "[inr]\nchannels = 2"),
    )
    .unwrap();
    assert_eq!(
        code(&isorec(
            dir,
            &["reconstruct", "--config", "two.toml", "--out", "r2"]
        )),
        1
    );

    let crop = isorec::load_volume(dir.join("b/gt.volume"))
        .unwrap()
        .crop([0, 0, 0], [8, 16, 16])
        .unwrap();
    isorec::save_volume(&crop, dir.join("crop.volume")).unwrap();
    assert_eq!(
        code(&isorec(
            dir,
            &["evaluate", "crop.volume", "b/gt.volume", "e"]
        )),
        1
    );
}

#[test]
fn missing_inputs_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let o = isorec(
        dir,
        &["sample-prior", "--checkpoint", "nowhere.ckpt", "--out", "s"],
    );
    assert_eq!(code(&o), 2);
    assert!(!o.stderr.is_empty());
}
