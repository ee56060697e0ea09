use std::path::Path;
use std::process::{Command, Output};

use icportrait::diffusion::gaussian;
use icportrait::tensor::{read_tensor, write_netpbm, write_tensor, Tensor};

fn icp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icportrait")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

fn pairs(dir: &Path, count: &str) -> String {
    let out = p(dir, "pairs");
    let o = icp(&["gen-pairs", "--count", count, "--size", "32", "--seed", "1", "--out", &out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn gen_pairs_writes_manifest_and_files() {
    let d = tempfile::tempdir().unwrap();
    let out = p(d.path(), "pairs");
    let o = icp(&["gen-pairs", "--count", "8", "--seed", "1", "--out", &out]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("manifest.csv"));
    let manifest = std::fs::read_to_string(Path::new(&out).join("manifest.csv")).unwrap();
    let rows: Vec<&str> = manifest.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    for row in rows {
        for f in row.split(',').skip(3) {
            assert!(Path::new(&out).join(f).exists(), "{f}");
        }
    }
    assert_eq!(code(&icp(&["gen-pairs", "--count", "8"])), 2);
    assert_eq!(code(&icp(&["gen-pairs", "--count", "0", "--out", &out])), 2);
}

#[test]
fn gen_pairs_unwritable_target_is_runtime_failure() {
    let d = tempfile::tempdir().unwrap();
    let blocker = p(d.path(), "file");
    std::fs::write(&blocker, b"x").unwrap();
    assert_eq!(code(&icp(&["gen-pairs", "--count", "1", "--out", &format!("{blocker}/sub")])), 1);
}

#[test]
fn match_reports() {
    let d = tempfile::tempdir().unwrap();
    let dir = pairs(d.path(), "1");
    let a = format!("{dir}/pair_0000_a.ppm");
    let b = format!("{dir}/pair_0000_b.ppm");

    let o = icp(&["match", "--a", &a, "--b", &a, "--out", &p(d.path(), "self")]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("zero_flow_fraction 1.000000"), "{}", stdout(&o));

    let out = p(d.path(), "m");
    let o = icp(&["match", "--a", &a, "--b", &b, "--gt", &format!("{dir}/pair_0000_flow.icmt"), "--vis", &format!("{dir}/pair_0000_vis.icmt"), "--out", &out]);
    assert_eq!(code(&o), 0);
    let hist = std::fs::read_to_string(Path::new(&out).join("epe_hist.csv")).unwrap();
    assert!(hist.starts_with("epe_lo,epe_hi,count\n"));
    assert_eq!(read_tensor(Path::new(&out).join("flow_l1.icmt")).unwrap().dims(), &[16, 16, 2]);

    let small = p(d.path(), "small.ppm");
    write_netpbm(&small, &Tensor::filled(vec![8, 8, 3], 0.5).unwrap()).unwrap();
    assert_eq!(code(&icp(&["match", "--a", &a, "--b", &small, "--out", &out])), 2);
    assert_eq!(code(&icp(&["match", "--a", &a, "--b", &p(d.path(), "missing.ppm"), "--out", &out])), 1);
}

#[test]
fn infer_target_pull_and_strength_checks() {
    let d = tempfile::tempdir().unwrap();
    let dir = pairs(d.path(), "2");
    let style = format!("{dir}/pair_0000_a.ppm");
    let target = format!("{dir}/pair_0001_a.ppm");
    let run = |out: &str| icp(&["infer", "--denoiser", "target-pull", "--style", &style, "--target", &target, "--iterations", "3", "--strength", "0.3", "--seed", "4", "--out", out]);
    let (o1, o2) = (p(d.path(), "i1"), p(d.path(), "i2"));
    assert_eq!(code(&run(&o1)), 0);
    assert_eq!(code(&run(&o2)), 0);
    for f in ["final.icmt", "final.ppm", "trace.csv"] {
        assert_eq!(std::fs::read(Path::new(&o1).join(f)).unwrap(), std::fs::read(Path::new(&o2).join(f)).unwrap());
    }
    let trace = std::fs::read_to_string(Path::new(&o1).join("trace.csv")).unwrap();
    let mut ends = std::collections::BTreeMap::new();
    for line in trace.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        ends.insert(f[0].parse::<usize>().unwrap(), f[3].parse::<f64>().unwrap());
    }
    let ends: Vec<f64> = ends.into_values().collect();
    assert_eq!(ends.len(), 3);
    assert!(ends.windows(2).all(|w| w[1] < w[0]), "{ends:?}");

    let bad = |extra: &[&str]| {
        let mut a = vec!["infer", "--style", style.as_str(), "--target", target.as_str(), "--out", o1.as_str()];
        a.extend_from_slice(extra);
        code(&icp(&a))
    };
    assert_eq!(bad(&["--iterations", "2", "--strengths", "0.3"]), 2);
    assert_eq!(bad(&["--strength", "1.5"]), 2);
    assert_eq!(bad(&["--strength", "0.3", "--strengths", "0.3,0.3,0.3"]), 2);
    assert_eq!(bad(&["--iterations", "0"]), 2);
    assert_eq!(code(&icp(&["infer", "--style", &style, "--out", &o1])), 2);
}

#[test]
fn infer_oracle_reconstructs() {
    let d = tempfile::tempdir().unwrap();
    let style = p(d.path(), "style.icmt");
    let img = gaussian(&[8, 8, 3], 3).unwrap().map(|v| 0.5 + 0.1 * v);
    write_tensor(&style, &img).unwrap();
    let out = p(d.path(), "o");
    assert_eq!(code(&icp(&["infer", "--denoiser", "oracle", "--style", &style, "--strength", "0.8", "--out", &out])), 0);
    let back = read_tensor(Path::new(&out).join("final.icmt")).unwrap();
    assert!(back.rms_distance(&img).unwrap() < 1e-5);
}

#[test]
fn train_then_infer_affine() {
    let d = tempfile::tempdir().unwrap();
    let ck = p(d.path(), "ck");
    let o = icp(&["train-toy", "--height", "6", "--width", "5", "--channels", "3", "--steps", "400", "--seed", "2", "--out", &ck]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let get = |k: &str| -> f64 {
        text.lines().find_map(|l| l.strip_prefix(k)).unwrap().trim().parse().unwrap()
    };
    assert!(get("final_loss") < get("initial_loss"));
    let style = p(d.path(), "s.icmt");
    write_tensor(&style, &Tensor::filled(vec![6, 5, 3], 0.4).unwrap()).unwrap();
    let out = p(d.path(), "inf");
    let run = |extra: &[&str]| {
        let mut a = vec!["infer", "--denoiser", "affine", "--checkpoint", ck.as_str(), "--style", style.as_str(), "--out", out.as_str()];
        a.extend_from_slice(extra);
        code(&icp(&a))
    };
    assert_eq!(run(&[]), 0);
    assert_eq!(run(&["--uncond", "shared"]), 0);
    let wrong = p(d.path(), "w.icmt");
    write_tensor(&wrong, &Tensor::filled(vec![4, 4, 3], 0.4).unwrap()).unwrap();
    assert_eq!(code(&icp(&["infer", "--denoiser", "affine", "--checkpoint", &ck, "--style", &wrong, "--out", &p(d.path(), "x")])), 1);
    assert_eq!(code(&icp(&["infer", "--denoiser", "affine", "--style", &style, "--out", &p(d.path(), "x")])), 2);
}

#[test]
fn mask_outputs() {
    let d = tempfile::tempdir().unwrap();
    let prefix = p(d.path(), "m");
    let o = icp(&["mask", "--height", "10", "--width", "10", "--ratio", "0.25", "--out", &prefix]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("kept 25 of 100"));
    let m = read_tensor(format!("{prefix}.icmt")).unwrap();
    assert_eq!(m.data().iter().filter(|&&v| v == 1.0).count(), 25);
    assert!(Path::new(&format!("{prefix}.pgm")).exists());
    assert_eq!(code(&icp(&["mask", "--ratio", "0.25", "--out", &prefix])), 2);
    assert_eq!(code(&icp(&["mask", "--height", "4", "--width", "4", "--ratio", "1.5", "--out", &prefix])), 2);

    let img = p(d.path(), "img.ppm");
    write_netpbm(&img, &Tensor::filled(vec![4, 6, 3], 0.8).unwrap()).unwrap();
    assert_eq!(code(&icp(&["mask", "--image", &img, "--reference", &img, "--ratio", "0.5", "--out", &prefix])), 0);
    assert_eq!(read_tensor(format!("{prefix}_cond.icmt")).unwrap().dims(), &[4, 12, 3]);
    assert!(Path::new(&format!("{prefix}_masked.ppm")).exists());
}

#[test]
fn warp_outputs() {
    let d = tempfile::tempdir().unwrap();
    let dir = pairs(d.path(), "2");
    let out = p(d.path(), "w");
    let o = icp(&["warp", "--profile", &format!("{dir}/pair_0001_a.ppm"), "--lighting", &format!("{dir}/pair_0000_a.ppm"), "--levels", "3", "--out", &out]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "level,weight\n0,1\n1,0.6666666666666667\n2,0.33333333333333337\n");
    for f in ["warped_l2.icmt", "aggregated_l0.icmt", "warped_profile.ppm"] {
        assert!(Path::new(&out).join(f).exists(), "{f}");
    }
}

#[test]
fn metrics_command() {
    let d = tempfile::tempdir().unwrap();
    let r = p(d.path(), "r.icmt");
    let pr = p(d.path(), "p.icmt");
    write_tensor(&r, &Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    let profiles = [1.0, 2.0, 2.0, 4.0, 2.0, 4.0, 2.0, 1.0, 3.0, 4.0, 0.0, 0.0, 4.0, 3.0, 0.0, 0.0];
    write_tensor(&pr, &Tensor::new(vec![4, 4], profiles.to_vec()).unwrap()).unwrap();
    let o = icp(&["metrics", "--results", &r, "--profiles", &pr, "--method", "Toy"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "Method,Min,Max,Median,Mean\nToy,0.200,0.800,0.500,0.500\n");
    let bad = p(d.path(), "bad.icmt");
    write_tensor(&bad, &Tensor::zeros(vec![2, 3]).unwrap()).unwrap();
    assert_eq!(code(&icp(&["metrics", "--results", &r, "--profiles", &bad])), 1);
    std::fs::write(&bad, b"junk").unwrap();
    assert_eq!(code(&icp(&["metrics", "--results", &r, "--profiles", &bad])), 1);
}

#[test]
fn bench_reports_windowed_storage() {
    let o = icp(&["bench", "--sizes", "64", "--window", "8", "--channels", "4", "--threads", "2"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("64,8,1,64x64x289,"), "{text}");
    assert!(text.contains("64,8,2,64x64x289,"));
    assert!(text.contains("bitwise identical"));
    assert_eq!(code(&icp(&["bench", "--sizes", "0"])), 2);
}

#[test]
fn schedule_and_config() {
    let d = tempfile::tempdir().unwrap();
    let o = icp(&["schedule", "--timesteps", "3"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().count(), 5);
    let cfg = p(d.path(), "run.cfg");
    std::fs::write(&cfg, "# short schedule\ntimesteps = 4\nbeta_end = 0.5\n").unwrap();
    let o = icp(&["schedule", "--config", &cfg, "--timesteps", "2"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().last().unwrap().starts_with("2,5.0"));
    std::fs::write(&cfg, "nonsense = 1\n").unwrap();
    assert_eq!(code(&icp(&["schedule", "--config", &cfg])), 2);
    assert_eq!(code(&icp(&["schedule", "--config", &p(d.path(), "absent.cfg")])), 2);
    assert_eq!(code(&icp(&["schedule", "--beta-start", "0.5", "--beta-end", "0.1"])), 2);
}

#[test]
fn usage_exit_codes() {
    assert_eq!(code(&icp(&["--help"])), 0);
    assert_eq!(code(&icp(&["frobnicate"])), 2);
    assert_eq!(code(&icp(&[])), 2);
    assert_eq!(code(&icp(&["schedule", "--threads", "0"])), 2);
    assert_eq!(code(&icp(&["schedule", "--seed", "minus-one"])), 2);
}
