use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use noisecollage::cli::MetricsDocument;
use noisecollage::geometry::{rasterize, RegionSpec};
use noisecollage::numerics::Tensor;
use noisecollage::pnm::decode;
use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_noisecollage"));
    c.env_remove("NC_WORKERS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_scene(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn analytic(mean: f64, sigma: f64) -> Value {
    json!({"analytic": {"mean": [mean], "sigma": sigma}})
}

fn two_region(extra_sampler: Value) -> Value {
    let mut sampler = json!({"steps": 20, "seed": 5});
    for (k, v) in extra_sampler.as_object().unwrap() {
        sampler[k] = v.clone();
    }
    json!({
        "canvas": {"channels": 1, "height": 16, "width": 16},
        "objects": [
            {"region": {"box": {"x0": 0, "y0": 0, "x1": 8, "y1": 16}}, "condition": analytic(1.5, 0.3)},
            {"region": {"box": {"x0": 8, "y0": 0, "x1": 16, "y1": 16}}, "condition": analytic(-1.5, 0.3)}
        ],
        "global": {"condition": analytic(0.0, 0.5)},
        "sampler": sampler
    })
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn validate_accepts_a_good_scene() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(dir.path(), "s.json", &two_region(json!({})));
    let o = run(&["validate", p(&scene)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "OK");
}

#[test]
fn validate_names_the_broken_rule() {
    let dir = tempfile::tempdir().unwrap();

    let mut v = two_region(json!({"alpha": 0.0}));
    v["objects"].as_array_mut().unwrap().pop();
    let scene = write_scene(dir.path(), "hole.json", &v);
    let o = run(&["validate", p(&scene)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("merge-config"), "{}", stderr(&o));
    assert!(stderr(&o).contains("sampler.alpha"));

    let mut v = two_region(json!({}));
    v["objects"][1]["region"]["box"]["x1"] = json!(8);
    let scene = write_scene(dir.path(), "inverted.json", &v);
    let o = run(&["validate", p(&scene)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("x0 < x1"), "{}", stderr(&o));
    assert!(stderr(&o).contains("objects[1].region"));

    let mut v = two_region(json!({}));
    v["objects"][0]["condition"]["analytic"]["sigm"] = json!(1);
    let scene = write_scene(dir.path(), "typo.json", &v);
    let o = run(&["validate", p(&scene)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("objects[0].condition.analytic.sigm"),
        "{}",
        stderr(&o)
    );

    fs::write(dir.path().join("broken.json"), "{\"canvas\": ").unwrap();
    let o = run(&["validate", p(&dir.path().join("broken.json"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

fn generate(scene: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["generate", p(scene), "--out", p(out)];
    args.extend_from_slice(extra);
    run(&args)
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

#[test]
fn generate_is_byte_deterministic_and_reports_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(
        dir.path(),
        "s.json",
        &json!({
            "canvas": {"channels": 1, "height": 16, "width": 16},
            "objects": [
                {"region": {"box": {"x0": 0, "y0": 0, "x1": 8, "y1": 16}}, "condition": analytic(1.5, 0.3)},
                {"region": {"box": {"x0": 8, "y0": 0, "x1": 16, "y1": 16}}, "condition": analytic(-1.5, 0.3)}
            ]
        }),
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = generate(&scene, out, &[]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let img = fs::read(a.join("sample.pgm")).unwrap();
    assert_eq!(img, fs::read(b.join("sample.pgm")).unwrap());
    let pgm = decode(&img).unwrap();
    assert_eq!((pgm.channels, pgm.height, pgm.width), (1, 16, 16));

    let r = report(&a);
    assert_eq!(
        r["defaults"],
        json!({"alpha": 0.1, "steps": 50, "guidance": 7.5})
    );
    assert_eq!(r["alpha"], json!(0.1));
    assert_eq!(r["steps"], json!(50));
    assert_eq!(r["guidance"], json!(7.5));
    assert_eq!(r["estimator_call_count"], json!(3 * 50 * 2));
    assert!(r["display_map"]["lo"].is_number());

    let text = fs::read_to_string(a.join("metrics.json")).unwrap();
    let doc: MetricsDocument = serde_json::from_str(&text).unwrap();
    assert_eq!(serde_json::to_string_pretty(&doc).unwrap() + "\n", text);
    assert!(doc.metrics.unwrap().layout_accuracy.unwrap() >= 0.95);
}

#[test]
fn flags_override_the_scene() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(dir.path(), "s.json", &two_region(json!({})));
    let out = |n: &str| dir.path().join(n);

    let o = generate(&scene, &out("one"), &["--steps", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        report(&out("one"))["estimator_call_count"],
        json!(3 * 2)
    );

    for (name, g) in [("g0", "0"), ("g1", "1")] {
        assert!(generate(&scene, &out(name), &["--guidance", g])
            .status
            .success());
    }
    assert_ne!(
        fs::read(out("g0").join("sample.pgm")).unwrap(),
        fs::read(out("g1").join("sample.pgm")).unwrap()
    );
    assert_eq!(report(&out("g1"))["estimator_call_count"], json!(3 * 20));

    assert!(
        generate(&scene, &out("seed"), &["--seed", "99", "--alpha", "2.5"])
            .status
            .success()
    );
    let r = report(&out("seed"));
    assert_eq!(
        (r["seed"].clone(), r["alpha"].clone()),
        (json!(99), json!(2.5))
    );

    let o = bin()
        .args(["generate", p(&scene), "--out", p(&out("env"))])
        .env("NC_WORKERS", "3")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(report(&out("env"))["workers"], json!(3));
    assert!(generate(&scene, &out("w1"), &["--workers", "1"])
        .status
        .success());
    assert_eq!(
        fs::read(out("env").join("sample.pgm")).unwrap(),
        fs::read(out("w1").join("sample.pgm")).unwrap()
    );

    let o = generate(&scene, &out("noise"), &["--dump-noise", "--steps", "3"]);
    assert!(o.status.success());
    let r = report(&out("noise"));
    assert_eq!(r["noise_files"].as_array().unwrap().len(), 3);
    let eps: Tensor = serde_json::from_str(
        &fs::read_to_string(out("noise").join("noise/eps_t0003.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(eps.shape(), &[1, 16, 16]);
}

#[test]
fn failed_runs_leave_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(dir.path(), "s.json", &two_region(json!({})));
    let out = dir.path().join("never");
    let o = generate(&scene, &out, &["--guidance", "1.7976931348623157e308"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("step t="));
    assert!(!out.exists());

    let o = generate(&scene, &out, &["--steps", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sampler.steps"));
    assert!(!out.exists());
}

fn paint(path: &Path, values: impl Fn(usize, usize) -> f64) {
    let t = Tensor::from_fn(&[1, 16, 16], |i| values(i % 16, i / 16));
    fs::write(path, serde_json::to_string(&t).unwrap()).unwrap();
}

fn eval(image: &Path, scene: &Path) -> (Option<i32>, Value) {
    let o = run(&["eval", p(image), p(scene)]);
    let v = serde_json::from_slice(&o.stdout).unwrap_or(Value::Null);
    (o.status.code(), v)
}

#[test]
fn eval_scores_painted_images() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(dir.path(), "s.json", &two_region(json!({})));

    let good = dir.path().join("good.json");
    paint(&good, |x, _| if x < 8 { 1.5 } else { -1.5 });
    let (code, m) = eval(&good, &scene);
    assert_eq!(code, Some(0));
    assert_eq!(m["layout_accuracy"], json!(1.0));
    assert_eq!(m["regions"][0]["match_score"], json!(1.0));
    assert_eq!(m["regions"][1]["match_score"], json!(1.0));

    let swapped = dir.path().join("swapped.json");
    paint(&swapped, |x, _| if x < 8 { -1.5 } else { 1.5 });
    assert_eq!(eval(&swapped, &scene).1["layout_accuracy"], json!(0.0));

    let out = dir.path().join("run");
    assert!(generate(&scene, &out, &[]).status.success());
    for image in ["sample.json", "sample.pgm"] {
        let (code, m) = eval(&out.join(image), &scene);
        assert_eq!(code, Some(0));
        assert!(
            m["layout_accuracy"].as_f64().unwrap() >= 0.95,
            "{image}: {m}"
        );
    }

    let small = Tensor::zeros(&[1, 8, 8]);
    fs::write(
        dir.path().join("small.json"),
        serde_json::to_string(&small).unwrap(),
    )
    .unwrap();
    let o = run(&["eval", p(&dir.path().join("small.json")), p(&scene)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("shape error"));
}

#[test]
fn dump_masks_writes_levels_and_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let polygon = vec![
        [1.5, 0.5],
        [14.0, 3.0],
        [9.0, 15.5],
        [4.0, 9.0],
        [0.5, 12.0],
    ];
    let scene = write_scene(
        dir.path(),
        "s.json",
        &json!({
            "canvas": {"channels": 1, "height": 16, "width": 16},
            "objects": [
                {"region": {"box": {"x0": 0, "y0": 0, "x1": 16, "y1": 16}}, "condition": "empty"},
                {"region": {"box": {"x0": 2, "y0": 2, "x1": 10, "y1": 10}}, "condition": "empty"},
                {"region": {"polygon": polygon}, "condition": "empty"}
            ]
        }),
    );
    let out = dir.path().join("masks");
    let o = run(&["dump-masks", p(&scene), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let read = |n: &str| decode(&fs::read(out.join(n)).unwrap()).unwrap();
    let full = read("object0_16x16.pgm");
    assert!(full.pixels.iter().all(|&b| b == 255));
    assert_eq!(read("object1_8x8.pgm").pixels.len(), 64);
    assert_eq!(read("object1_4x4.pgm").pixels.len(), 16);

    // Even-odd ray casting through pixel centres.
    let inside = |px: f64, py: f64| {
        let mut c = false;
        for i in 0..polygon.len() {
            let [xi, yi] = polygon[i];
            let [xj, yj] = polygon[(i + polygon.len() - 1) % polygon.len()];
            if (yi > py) != (yj > py) && px < xj + (py - yj) * (xi - xj) / (yi - yj) {
                c = !c;
            }
        }
        c
    };
    let poly = read("object2_16x16.pgm");
    let ours = rasterize(&RegionSpec::Polygon(polygon.clone()), (16, 16)).unwrap();
    for y in 0..16 {
        for x in 0..16 {
            let want = inside(x as f64 + 0.5, y as f64 + 0.5);
            assert_eq!(poly.pixels[y * 16 + x] == 255, want, "pixel ({x}, {y})");
            assert_eq!(ours.get(x, y), want);
        }
    }

    let cov = read("coverage.pgm");
    for y in 0..16 {
        for x in 0..16 {
            let want = 1
                + (2..10).contains(&x) as u8 * (2..10).contains(&y) as u8
                + inside(x as f64 + 0.5, y as f64 + 0.5) as u8;
            assert_eq!(cov.pixels[y * 16 + x], want);
        }
    }
}

#[test]
fn unet_scene_and_weights_file() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("w.ncuw");
    assert!(run(&["init-weights", "--seed", "3", "--out", p(&weights)])
        .status
        .success());
    let scene = write_scene(
        dir.path(),
        "u.json",
        &json!({
            "canvas": {"channels": 3, "height": 32, "width": 32},
            "objects": [{"region": {"box": {"x0": 0, "y0": 0, "x1": 20, "y1": 20}}, "condition": {"tokens": [4, 5]}}],
            "global": {"condition": {"tokens": [9]}},
            "sampler": {"backend": "unet", "steps": 2, "weights": "w.ncuw"}
        }),
    );
    let out = dir.path().join("u");
    let o = generate(&scene, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ppm = decode(&fs::read(out.join("sample.ppm")).unwrap()).unwrap();
    assert_eq!((ppm.channels, ppm.height, ppm.width), (3, 32, 32));
    let doc: MetricsDocument =
        serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(doc.metrics.is_none() && doc.unavailable_reason.is_some());

    fs::write(&weights, b"NCUW\x02\0\0\0").unwrap();
    let o = run(&["validate", p(&scene)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sampler.weights"), "{}", stderr(&o));
}
