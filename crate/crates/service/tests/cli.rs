use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use enclip_core::evalkit::{synth_fixture, write_fixture, SynthSpec};

fn enclip() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_enclip"));
    cmd.env_remove("ENCLIP_ENCODER_URL")
        .env_remove("ENCLIP_STORES")
        .env_remove("ENCLIP_PORT")
        .env_remove("ENCLIP_IMAGES_DIR")
        .env("RUST_LOG", "info");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn small_fixture(dir: &Path) {
    let spec = SynthSpec {
        items: 300,
        groups: 6,
        models: 3,
        dim: 16,
        queries_per_group: 2,
        ..SynthSpec::default()
    };
    write_fixture(&synth_fixture(5, &spec).unwrap(), dir).unwrap();
}

#[test]
fn ingest_writes_a_readable_store() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("vectors.jsonl");
    std::fs::write(
        &input,
        "{\"model_id\":\"epoch10\",\"epoch\":10,\"dim\":2}\n{\"id\":\"a\",\"vec\":[3,4]}\n{\"id\":\"b\",\"vec\":[0,2]}\n",
    )
    .unwrap();
    let out = dir.path().join("e.encb");
    let o = run(enclip()
        .arg("ingest")
        .arg("--input")
        .arg(&input)
        .args(["--model-id", "ck", "--epoch", "7", "--out"])
        .arg(&out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = enclip_core::read_store(&out).unwrap();
    assert_eq!(m.model_id(), "ck");
    assert_eq!(m.epoch(), 7);
    assert_eq!(m.vector_of("a").unwrap(), &[0.6, 0.8]);
}

#[test]
fn ingest_reports_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.jsonl");
    std::fs::write(&input, "{\"model_id\":\"m\",\"epoch\":1,\"dim\":2}\n{\"id\":\"a\",\"vec\":[1]}\n").unwrap();
    let o = run(enclip().arg("ingest").arg("--input").arg(&input).arg("--out").arg(dir.path().join("x.encb")));
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn query_prints_one_row_per_item() {
    let dir = tempfile::tempdir().unwrap();
    small_fixture(dir.path());
    let o = run(enclip()
        .arg("query")
        .arg("--stores")
        .arg(dir.path())
        .arg("--qvec-file")
        .arg(dir.path().join("queries.jsonl"))
        .args(["--query-id", "g01-q0", "--n", "10"]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 11);
    assert!(lines[0].contains("item_id") && lines[0].contains("weighted_score"));
    for (i, line) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cols.len(), 4);
        assert_eq!(cols[0], (i + 1).to_string());
        assert!(cols[1].starts_with("item"));
        cols[2].parse::<usize>().unwrap();
        cols[3].parse::<f64>().unwrap();
    }
}

#[test]
fn query_json_and_vector_map_file() {
    let dir = tempfile::tempdir().unwrap();
    small_fixture(dir.path());
    let queries = enclip_core::evalkit::read_queries(&dir.path().join("queries.jsonl")).unwrap();
    let map = dir.path().join("q.json");
    std::fs::write(&map, serde_json::to_string(queries[3].vectors.as_ref().unwrap()).unwrap()).unwrap();
    let o = run(enclip()
        .env("ENCLIP_STORES", dir.path())
        .arg("query")
        .arg("--qvec-file")
        .arg(&map)
        .args(["--json", "--n", "5", "--comparator", "ws_only"]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["items"].as_array().unwrap().len(), 5);
    assert!(v.get("diagnostics").is_none());
}

#[test]
fn query_errors() {
    let dir = tempfile::tempdir().unwrap();
    small_fixture(dir.path());
    let o = run(enclip().arg("query").arg("--stores").arg(dir.path()).args(["--text", "red shoes"]));
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("ENCLIP_ENCODER_URL"));

    let o = run(enclip()
        .arg("query")
        .arg("--stores")
        .arg(dir.path())
        .arg("--qvec-file")
        .arg(dir.path().join("queries.jsonl")));
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--query-id"));

    let o = run(enclip().arg("query").arg("--stores").arg(dir.path().join("missing")).args(["--text", "x"]));
    assert!(!o.status.success());
}

#[test]
fn eval_prints_a_grid() {
    let dir = tempfile::tempdir().unwrap();
    small_fixture(dir.path());
    let o = run(enclip()
        .arg("eval")
        .arg("--stores")
        .arg(dir.path())
        .arg("--queries")
        .arg(dir.path().join("queries.jsonl"))
        .arg("--qrels")
        .arg(dir.path().join("qrels.jsonl"))
        .args(["--k", "10", "--denominator", "total"]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let header = text.lines().nth(1).unwrap();
    for col in ["epoch10", "epoch30", "epoch50", "ENCLIP"] {
        assert!(header.contains(col), "{header}");
    }
    // Six category rows plus the overall row.
    assert_eq!(text.lines().filter(|l| l.starts_with("group")).count(), 6);
    assert!(text.lines().any(|l| l.starts_with("All")));
}

#[test]
fn synth_writes_all_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(enclip()
        .arg("synth")
        .arg("--out")
        .arg(dir.path())
        .args(["--seed", "3", "--items", "100", "--groups", "4", "--models", "2", "--dim", "8"]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["epoch10.encb", "epoch30.encb", "queries.jsonl", "qrels.jsonl"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn serve_answers_health() {
    let dir = tempfile::tempdir().unwrap();
    small_fixture(dir.path());
    let mut child = enclip()
        .arg("serve")
        .arg("--stores")
        .arg(dir.path())
        .args(["--port", "0"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let stderr = child.stderr.take().unwrap();
    let addr = BufReader::new(stderr)
        .lines()
        .map_while(Result::ok)
        .find_map(|l| l.split("listening on ").nth(1).map(|a| a.trim().to_string()))
        .expect("server reports its address");

    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /health HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();

    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    let body = response.split("\r\n\r\n").nth(1).unwrap();
    let v: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(v["z"], 3);
    assert_eq!(v["dim"], 16);
    assert_eq!(v["corpus_size"], 300);
}
