use glut_core::cglut::CglutModel;
use glut_core::glut::bake_to_cube;
use glut_core::lut_io::{parse_cube, read_image, write_cube, write_image, BitDepth};
use glut_core::{CubeLut, GaussianPrimitive, GenerationMode, GlutModel, Image, ModelFile, Rgb};
use serde_json::Value;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use tempfile::TempDir;

fn glut(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glut")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn test_image(w: usize, h: usize) -> Image {
    Image::new(
        w,
        h,
        (0..w * h)
            .map(|i| Rgb::new((i % w) as f64 / (w - 1) as f64, (i / w) as f64 / (h - 1) as f64, ((i * 37) % 256) as f64 / 255.0))
            .collect(),
    )
}

fn smooth_model() -> GlutModel {
    let prims: Vec<_> = (0..8)
        .map(|i| {
            let c = |k: usize| if i >> k & 1 == 1 { 0.8 } else { 0.2 };
            let mut p = GaussianPrimitive::isotropic([c(0), c(1), c(2)], 0.2, 2.0);
            p.local_bias = [0.02 * i as f64, -0.01, 0.0];
            p
        })
        .collect();
    GlutModel::from_primitives(&prims, [0.0; 9], [0.0; 3], 1e-6).unwrap().quantized_f32()
}

fn save(dir: &TempDir, name: &str, f: ModelFile) -> PathBuf {
    let path = p(dir, name);
    f.save(&path).unwrap();
    path
}

fn conditional() -> CglutModel {
    let mut m = CglutModel::new(3, 8, 8, 6, GenerationMode::FullGeneration, 1);
    for (i, v) in m.generator.params.iter_mut().enumerate() {
        *v += 0.03 * (i as f64 * 0.11).cos();
    }
    m.quantized_f32()
}

fn last_log_line(path: &Path) -> Value {
    let text = std::fs::read_to_string(path).unwrap();
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

#[test]
fn fit_identity_then_eval_agrees_with_log() {
    let dir = TempDir::new().unwrap();
    let cube = p(&dir, "identity.cube");
    std::fs::write(&cube, write_cube(&CubeLut::identity(33))).unwrap();
    let model = p(&dir, "id.glut");
    let o = glut(&["fit", "--cube", s(&cube), "--lattice", "32", "--quiet", "--out", s(&model)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(model.exists());
    let log = p(&dir, "id.glut.log.jsonl");
    let last = last_log_line(&log);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 20);
    assert_eq!(last["epoch"], 19);
    let psnr = last["holdout_psnr"].as_f64().unwrap();
    assert!(psnr >= 55.0, "{psnr}");

    let o = glut(&["eval", "--model", s(&model), "--cube", s(&cube), "--lattice", "32", "--json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["report"]["psnr"].as_f64().unwrap() - psnr).abs() < 0.01);
    assert_eq!(v["primitives"], 32);
}

#[test]
fn fit_from_image_pairs() {
    let dir = TempDir::new().unwrap();
    let src = test_image(48, 40);
    let graded = Image::new(48, 40, src.pixels.iter().map(|c| Rgb::new(c.r * 0.8 + 0.1, c.g, c.b * c.b)).collect());
    let (a, b) = (p(&dir, "a.png"), p(&dir, "b.png"));
    write_image(&a, &src, BitDepth::Eight).unwrap();
    write_image(&b, &graded, BitDepth::Eight).unwrap();
    let model = p(&dir, "pairs.glut");
    let log = p(&dir, "log.jsonl");
    let o = glut(&[
        "fit", "--pairs", s(&a), s(&b), "--gaussians", "8", "--epochs", "3", "--json", "--log", s(&log), "--out", s(&model),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["parameters"], 22 * 8 + 12);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 3);
    let o = glut(&["eval", "--model", s(&model), "--pairs", s(&a), s(&b)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PSNR"));
}

#[test]
fn usage_and_parse_errors() {
    let dir = TempDir::new().unwrap();
    let bad = p(&dir, "bad.cube");
    std::fs::write(&bad, "TITLE \"x\"\n0 0 0\n1 0 0\n").unwrap();
    let out = p(&dir, "m.glut");
    let o = glut(&["fit", "--cube", s(&bad), "--out", s(&out)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let good = p(&dir, "id.cube");
    std::fs::write(&good, write_cube(&CubeLut::identity(2))).unwrap();
    let o = glut(&["fit", "--cube", s(&good), "--gaussians", "0", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let o = glut(&["fit", "--cube", s(&good), "--bogus", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let o = glut(&["fit", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let o = glut(&["fit", "--cube", s(&p(&dir, "missing.cube")), "--out", s(&out)]);
    assert_eq!(code(&o), 4);

    let mut bytes = ModelFile::Glut(smooth_model()).to_bytes();
    bytes.truncate(bytes.len() - 3);
    let trunc = p(&dir, "trunc.glut");
    std::fs::write(&trunc, bytes).unwrap();
    let o = glut(&["bake", "--model", s(&trunc), s(&p(&dir, "x.cube"))]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("truncated"));

    for sub in ["fit", "fit-cglut", "apply", "bake", "edit", "eval", "bench", "serve"] {
        let o = glut(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
    }
}

#[test]
fn divergence_has_its_own_exit_code() {
    let dir = TempDir::new().unwrap();
    let cube = p(&dir, "id.cube");
    std::fs::write(&cube, write_cube(&CubeLut::identity(5))).unwrap();
    let o = glut(&[
        "fit", "--cube", s(&cube), "--lattice", "8", "--gaussians", "4", "--epochs", "2", "--lr", "1e300", "--quiet", "--out",
        s(&p(&dir, "m.glut")),
    ]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}

#[test]
fn apply_identity_is_exact() {
    let dir = TempDir::new().unwrap();
    let model = save(&dir, "id.glut", ModelFile::Glut(GlutModel::identity(8)));
    let img = p(&dir, "in.png");
    write_image(&img, &test_image(33, 17), BitDepth::Eight).unwrap();
    let out = p(&dir, "out.png");
    let o = glut(&["apply", "--model", s(&model), s(&img), s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_image(&img).unwrap(), read_image(&out).unwrap());
}

#[test]
fn apply_flag_equivalences() {
    let dir = TempDir::new().unwrap();
    let img = p(&dir, "in.png");
    write_image(&img, &test_image(20, 20), BitDepth::Sixteen).unwrap();
    let run = |args: &[&str], name: &str| -> Vec<u8> {
        let out = p(&dir, name);
        let mut all = args.to_vec();
        all.extend([s(&img), s(&out)]);
        let o = glut(&all);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read(out).unwrap()
    };
    let cg = save(&dir, "c.glut", ModelFile::Cglut(conditional()));
    let style0 = run(&["apply", "--model", s(&cg), "--style", "0"], "s0.png");
    let blend0 = run(&["apply", "--model", s(&cg), "--blend", "0", "1", "--alpha", "0"], "b0.png");
    let style1 = run(&["apply", "--model", s(&cg), "--style", "1"], "s1.png");
    assert_eq!(style0, blend0);
    assert_ne!(style0, style1);

    let g = save(&dir, "g.glut", ModelFile::Glut(smooth_model()));
    let full = run(&["apply", "--model", s(&g)], "f.png");
    let keep1 = run(&["apply", "--model", s(&g), "--keep-fraction", "1.0"], "k.png");
    assert_eq!(full, keep1);
    let threaded = run(&["apply", "--model", s(&g), "--threads", "3"], "t.png");
    assert_eq!(full, threaded);
    assert_eq!(read_image(dir.path().join("f.png")).unwrap().1, BitDepth::Sixteen);

    let o = glut(&["apply", "--model", s(&g), "--style", "0", s(&img), s(&p(&dir, "x.png"))]);
    assert_eq!(code(&o), 6);
    let o = glut(&["apply", "--model", s(&cg), s(&img), s(&p(&dir, "x.png"))]);
    assert_eq!(code(&o), 6);
    let o = glut(&["apply", "--model", s(&cg), "--style", "5", s(&img), s(&p(&dir, "x.png"))]);
    assert_eq!(code(&o), 6);
    let o = glut(&["apply", "--model", s(&cg), "--blend", "0", "1", "--alpha", "1.5", s(&img), s(&p(&dir, "x.png"))]);
    assert_eq!(code(&o), 2);
    let o = glut(&["apply", "--model", s(&cg), "--blend", "0", "1", s(&img), s(&p(&dir, "x.png"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bake_identity_size_two() {
    let dir = TempDir::new().unwrap();
    let model = save(&dir, "id.glut", ModelFile::Glut(GlutModel::identity(4)));
    let out = p(&dir, "id.cube");
    let o = glut(&["bake", "--model", s(&model), "--size", "2", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let data: Vec<&str> = text
        .lines()
        .filter(|l| l.trim().starts_with(|c: char| c.is_ascii_digit() || c == '-'))
        .collect();
    assert_eq!(data.len(), 8);
    let cube = parse_cube(text.as_bytes()).unwrap();
    for (a, b) in cube.entries.iter().zip(&CubeLut::identity(2).entries) {
        assert!((a.r - b.r).abs() < 1e-6 && (a.g - b.g).abs() < 1e-6 && (a.b - b.b).abs() < 1e-6);
    }
    let m = smooth_model();
    let model = save(&dir, "m.glut", ModelFile::Glut(m.clone()));
    let out = p(&dir, "m.cube");
    assert_eq!(code(&glut(&["bake", "--model", s(&model), "--size", "5", s(&out)])), 0);
    assert_eq!(std::fs::read(&out).unwrap(), write_cube(&bake_to_cube(&m, 5)));
}

#[test]
fn edit_reports_and_writes() {
    let dir = TempDir::new().unwrap();
    let model = save(&dir, "m.glut", ModelFile::Glut(smooth_model()));
    let out = p(&dir, "same.glut");
    let o = glut(&[
        "edit", "--model", s(&model), "--cin", "#406080", "--cout", "0.5,0.2,0.1", "--k", "3", "--strength", "0", "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(&out).unwrap());

    let edited = p(&dir, "edited.glut");
    let journal = p(&dir, "j.jsonl");
    let o = glut(&[
        "edit", "--model", s(&model), "--cin", "#406080", "--cout", "0.5,0.2,0.1", "--k", "3", "--strength", "0.6",
        "--journal", s(&journal), "--json", "--out", s(&edited),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let m = v["m"].as_f64().unwrap();
    for k in 0..3 {
        let b = v["residual_before"][k].as_f64().unwrap();
        let a = v["residual_after"][k].as_f64().unwrap();
        assert!((a - (1.0 - 0.6 * m) * b).abs() < 1e-9);
    }
    assert_eq!(std::fs::read_to_string(&journal).unwrap().lines().count(), 1);
    assert_ne!(std::fs::read(&model).unwrap(), std::fs::read(&edited).unwrap());

    let o = glut(&["edit", "--model", s(&model), "--cin", "#406080", "--cout", "#000000", "--out", s(&edited)]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("residual before") && text.contains("residual after") && text.contains("m "));

    let far = GaussianPrimitive::isotropic([0.95, 0.95, 0.95], 0.01, 0.0);
    let lonely = GlutModel::from_primitives(&[far], [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], [0.0; 3], 1e-6).unwrap();
    let lonely = save(&dir, "lonely.glut", ModelFile::Glut(lonely.quantized_f32()));
    let o = glut(&["edit", "--model", s(&lonely), "--cin", "#101010", "--cout", "#202020", "--k", "1", "--out", s(&edited)]);
    assert_eq!(code(&o), 7, "{}", stderr(&o));
    let o = glut(&["edit", "--model", s(&lonely), "--cin", "#101010", "--cout", "#202020", "--k", "2", "--out", s(&edited)]);
    assert_eq!(code(&o), 2);
    let o = glut(&["edit", "--model", s(&lonely), "--cin", "#10101", "--cout", "#202020", "--out", s(&edited)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_file_supplies_flags() {
    let dir = TempDir::new().unwrap();
    let model = save(&dir, "m.glut", ModelFile::Glut(smooth_model()));
    let cfg = p(&dir, "glut.conf");
    std::fs::write(&cfg, "# defaults\n[bake]\nsize = 3\n").unwrap();
    let out = p(&dir, "a.cube");
    let o = glut(&["--config", s(&cfg), "bake", "--model", s(&model), s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(parse_cube(&std::fs::read(&out).unwrap()).unwrap().size, 3);
    let o = glut(&["bake", "--config", s(&cfg), "--size", "4", "--model", s(&model), s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(parse_cube(&std::fs::read(&out).unwrap()).unwrap().size, 4);

    std::fs::write(&cfg, "[bake]\nwidth = 3\n").unwrap();
    let o = glut(&["--config", s(&cfg), "bake", "--model", s(&model), s(&out)]);
    assert_eq!(code(&o), 2);
    std::fs::write(&cfg, "size 3\n").unwrap();
    let o = glut(&["--config", s(&cfg), "bake", "--model", s(&model), s(&out)]);
    assert_eq!(code(&o), 3);
    let o = glut(&["--config", s(&p(&dir, "none.conf")), "bake", "--model", s(&model), s(&out)]);
    assert_eq!(code(&o), 4);
}

#[test]
fn fit_cglut_small() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (p(&dir, "a.cube"), p(&dir, "b.cube"));
    std::fs::write(&a, write_cube(&CubeLut::identity(9))).unwrap();
    std::fs::write(&b, write_cube(&CubeLut::from_fn(9, |c| Rgb::new(c.r * c.r, c.g, c.b)))).unwrap();
    let out = p(&dir, "c.glut");
    let o = glut(&[
        "fit-cglut", "--cube", s(&a), "--cube", s(&b), "--gaussians", "4", "--embed-dim", "8", "--hidden", "8", "--lattice",
        "8", "--epochs", "2", "--batch", "256", "--json", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["styles"], 2);
    assert_eq!(v["final"]["holdout"].as_array().unwrap().len(), 2);
    assert!(matches!(ModelFile::load(&out).unwrap(), ModelFile::Cglut(_)));
    let o = glut(&["fit-cglut", "--cube", s(&a), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bench_json() {
    let dir = TempDir::new().unwrap();
    let model = save(&dir, "m.glut", ModelFile::Glut(smooth_model()));
    let o = glut(&["bench", "--model", s(&model), "--resolution", "32x16", "--threads", "1", "--json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v[0]["width"], 32);
    assert_eq!(v[0]["runs"], 20);
    assert!(v[0]["fps"].as_f64().unwrap() > 0.0);
}

#[test]
fn serve_answers_http() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_glut"))
        .args(["serve", "--port", "0"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().rsplit("http://").next().unwrap().to_string();
    let mut conn = std::net::TcpStream::connect(&addr).unwrap();
    conn.write_all(b"GET /sessions/none HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    conn.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 404"), "{resp}");
}
