use esmm::io::{parse_log, parse_truth, read_log_file, write_log, write_log_file, write_truth};
use esmm::synth::{build_world, gen_dataset, WorldConfig};
use esmm::Error;

fn synthetic(n: usize) -> (esmm::feature::Dataset, Vec<esmm::synth::Truth>) {
    let cfg = WorldConfig {
        probe_n: 20_000,
        ..WorldConfig::default()
    };
    let gt = build_world(&cfg, 3).unwrap();
    gen_dataset(&gt, n, 4).unwrap()
}

#[test]
fn ten_thousand_samples_round_trip_byte_identical() {
    let (d, truths) = synthetic(10_000);
    let mut first = Vec::new();
    write_log(&d, &mut first).unwrap();
    let back = parse_log(first.as_slice(), false).unwrap();
    assert_eq!(back, d);
    let mut second = Vec::new();
    write_log(&back, &mut second).unwrap();
    assert_eq!(first, second);

    let mut t = Vec::new();
    write_truth(&truths, &mut t).unwrap();
    assert_eq!(parse_truth(t.as_slice()).unwrap(), truths);
}

#[test]
fn file_round_trip() {
    let (d, _) = synthetic(500);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.tsv");
    write_log_file(&d, &path).unwrap();
    assert_eq!(read_log_file(&path, false).unwrap(), d);
}

fn parse_line_error(text: &str) -> (usize, String) {
    match parse_log(text.as_bytes(), false) {
        Err(Error::Parse { line, message }) => (line, message),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn conversion_without_click_reports_its_line() {
    let text = "#fields=2 vocab=3,3 dim=2\n0\t1\t1\t0:1 1:2\n1\t0\t0\t0:0\n2\t0\t1\t1:1\n3\t0\t0\t\n";
    let (line, message) = parse_line_error(text);
    assert_eq!(line, 4);
    assert!(message.contains("conversion without click"), "{message}");
}

#[test]
fn malformed_lines_report_their_line() {
    let head = "#fields=2 vocab=3,3 dim=2\n0\t0\t0\t0:1\n";
    for (bad, what) in [
        ("1\t0\t0\t0:3", "out of vocab"),
        ("1\t0\t0\t2:0", "unknown field"),
        ("1\t2\t0\t0:0", "bad flag"),
        ("x\t0\t0\t0:0", "bad timestamp"),
        ("1\t0", "columns"),
        ("-1\t0\t0\t0:0", "time order"),
    ] {
        let text = format!("{head}{bad}\n");
        assert_eq!(parse_line_error(&text).0, 3, "{what}");
    }
    assert_eq!(parse_line_error("fields=2\n").0, 1);
}

#[test]
fn sort_flag_orders_out_of_time_lines() {
    let text = "#fields=1 vocab=2 dim=2\n5\t0\t0\t0:1\n1\t1\t0\t0:0\n";
    let d = parse_log(text.as_bytes(), true).unwrap();
    let ts: Vec<i64> = d.samples().iter().map(|s| s.timestamp).collect();
    assert_eq!(ts, vec![1, 5]);
}
