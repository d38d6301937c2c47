mod common;

use common::{email, kit_images, Env};
use pisco_service::cli::{run, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

fn pisco(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("pisco").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn write_config(env: &Env) -> String {
    let path = env.dir.path().join("pisco.toml");
    std::fs::write(&path, env.config().to_toml()).unwrap();
    path.display().to_string()
}

#[test]
fn usage_and_help() {
    assert_eq!(pisco(&[]).0, EXIT_USAGE);
    assert_eq!(pisco(&["frobnicate"]).0, EXIT_USAGE);
    assert_eq!(pisco(&["label", "1", "maybe"]).0, EXIT_USAGE);
    let (code, out, _) = pisco(&["--help"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("ingest"));
    assert_eq!(pisco(&["--version"]).0, EXIT_OK);
}

#[test]
fn config_errors() {
    let env = Env::new();
    let missing = env.dir.path().join("nope.toml").display().to_string();
    assert_eq!(pisco(&["-c", &missing, "stats", "--kind", "histogram"]).0, EXIT_CONFIG);

    let bad = env.dir.path().join("bad.toml");
    std::fs::write(&bad, "[cluster]\ntau = \"high\"\n").unwrap();
    let (code, _, err) = pisco(&["-c", &bad.display().to_string(), "stats", "--kind", "histogram"]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("config error"), "{err}");

    let cfg = write_config(&env);
    assert_eq!(pisco(&["-c", &cfg, "--set", "cluster.tau=1.5", "stats", "--kind", "lifespan"]).0, EXIT_CONFIG);
    assert_eq!(pisco(&["-c", &cfg, "--set", "nokey", "stats", "--kind", "lifespan"]).0, EXIT_CONFIG);
}

#[test]
fn ingest_label_score_stats() {
    let env = Env::new();
    let imgs = kit_images(5, 2, 2);
    let mail = env.dir.path().join("mail");
    std::fs::create_dir_all(&mail).unwrap();
    let a = email("Spring sale", "Up to 70% off today", 2);
    let b = email("Spring sale", "Up to 60% off this week", 9);
    let c = email("Account notice", "Your statement is ready", 12);
    env.add_fixture(&a, &imgs[0].image);
    env.add_fixture(&b, &imgs[1].image);
    env.add_fixture(&c, &imgs[2].image);
    std::fs::write(mail.join("1.eml"), &a).unwrap();
    std::fs::write(mail.join("2.eml"), &b).unwrap();
    let cfg = write_config(&env);

    let (code, out, err) = pisco(&["-c", &cfg, "ingest", &mail.display().to_string()]);
    assert_eq!(code, EXIT_OK, "{err}");
    let lines: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["cluster_id"], lines[1]["cluster_id"]);
    let cid = lines[0]["cluster_id"].to_string();

    let (code, _, _) = pisco(&["-c", &cfg, "label", &cid, "spam"]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(pisco(&["-c", &cfg, "label", "4242", "spam"]).0, EXIT_RUNTIME);

    let cfile = env.dir.path().join("c.eml");
    std::fs::write(&cfile, &c).unwrap();
    let bfile = mail.join("2.eml");
    let (code, out, _) = pisco(&["-c", &cfg, "score", &bfile.display().to_string()]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("\"spam\""), "{out}");
    let (_, out, _) = pisco(&["-c", &cfg, "score", &cfile.display().to_string()]);
    assert!(out.contains("\"unknown\""), "{out}");

    let (code, out, _) = pisco(&["-c", &cfg, "stats", "--kind", "histogram"]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(out, "cluster_size,cluster_count\n2,1\n");
    let csv = env.dir.path().join("life.csv");
    let (code, _, _) = pisco(&["-c", &cfg, "stats", "--kind", "lifespan", "--out", &csv.display().to_string()]);
    assert_eq!(code, EXIT_OK);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("cluster_id,first_seen,last_seen,lifespan_seconds,member_count\n"));
    assert!(text.contains("2024-04-02T09:30:00Z,2024-04-09T09:30:00Z,604800,2"), "{text}");
}

#[test]
fn partial_ingest_failure_is_runtime_error() {
    let env = Env::new();
    let imgs = kit_images(5, 1, 1);
    let mail = env.dir.path().join("mail");
    std::fs::create_dir_all(&mail).unwrap();
    let a = email("Spring sale", "Up to 70% off today", 2);
    env.add_fixture(&a, &imgs[0].image);
    std::fs::write(mail.join("1.eml"), &a).unwrap();
    std::fs::write(mail.join("2.eml"), email("No fixture", "missing", 3)).unwrap();
    let data = env.data().display().to_string();
    let cfg = write_config(&env);
    let (code, out, err) = pisco(&["-c", &cfg, "--data-dir", &data, "ingest", &mail.display().to_string()]);
    assert_eq!(code, EXIT_RUNTIME);
    assert_eq!(out.lines().count(), 1);
    assert!(err.contains("render/FixtureMissing"), "{err}");
    assert!(env.data().join("dead_letter.jsonl").exists());
}

#[test]
fn mbox_ingest() {
    let env = Env::new();
    let imgs = kit_images(5, 1, 2);
    let a = email("Spring sale", "Up to 70% off today", 2);
    let b = email("Spring sale", "Up to 60% off this week", 9);
    env.add_fixture(&a, &imgs[0].image);
    env.add_fixture(&b, &imgs[1].image);
    let mut mbox = Vec::new();
    for m in [&a, &b] {
        mbox.extend_from_slice(b"From promo@example.com Tue Apr  2 09:30:00 2024\n");
        mbox.extend_from_slice(&String::from_utf8_lossy(m).replace("\r\n", "\n").into_bytes());
        mbox.push(b'\n');
    }
    let path = env.dir.path().join("inbox.mbox");
    std::fs::write(&path, mbox).unwrap();
    let cfg = write_config(&env);
    let (code, out, err) = pisco(&["-c", &cfg, "ingest", &path.display().to_string()]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(out.lines().count(), 2);
}

#[test]
fn synth_writes_manifest() {
    let env = Env::new();
    let spec = env.dir.path().join("spec.toml");
    std::fs::write(&spec, "seed = 3\nn_kits = 2\nvariants_per_kit = 2\ncanvas = [200, 240]\n").unwrap();
    let out_dir = env.dir.path().join("synth");
    let (code, _, err) = pisco(&["synth", "--spec", &spec.display().to_string(), "--out", &out_dir.display().to_string()]);
    assert_eq!(code, EXIT_OK, "{err}");
    let manifest = std::fs::read_to_string(out_dir.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 5);
    assert!(manifest.starts_with("email_id,kit_id,received_at\n"));

    std::fs::write(&spec, "n_kits = 0\n").unwrap();
    assert_eq!(pisco(&["synth", "--spec", &spec.display().to_string(), "--out", &out_dir.display().to_string()]).0, EXIT_CONFIG);
}
