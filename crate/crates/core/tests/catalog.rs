use divrank::catalog::{generate_synthetic, load_jsonl, parse_jsonl, split_train_eval, to_jsonl, write_jsonl, SyntheticSpec};

fn spec(requests: usize) -> SyntheticSpec {
    SyntheticSpec { num_requests: requests, candidates_per_request: 50, catalog_size: 2000, ..SyntheticSpec::default() }
}

#[test]
fn jsonl_round_trip_of_a_thousand_requests() {
    let data = generate_synthetic(&spec(1000)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    write_jsonl(&data, &path).unwrap();
    let back = load_jsonl(&path).unwrap();
    assert_eq!(back.len(), 1000);
    assert_eq!(to_jsonl(&back), std::fs::read_to_string(&path).unwrap());
    for (a, b) in data.requests.iter().zip(&back.requests) {
        assert_eq!(a.request_id, b.request_id);
        assert_eq!(data.vocab.users.name(a.user), back.vocab.users.name(b.user));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.candidates.iter().zip(&b.candidates) {
            assert_eq!(data.vocab.item(x.item), back.vocab.item(y.item));
            assert_eq!(x.label, y.label);
        }
    }
}

#[test]
fn parse_errors_name_the_line() {
    let data = generate_synthetic(&spec(3)).unwrap();
    let mut lines: Vec<String> = to_jsonl(&data).lines().map(str::to_string).collect();
    lines[1] = "{\"request_id\": 5}".into();
    match parse_jsonl(&lines.join("\n")) {
        Err(divrank::Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{:?}", other.map(|d| d.len())),
    }
}

#[test]
fn split_is_disjoint_and_seeded() {
    let data = generate_synthetic(&spec(60)).unwrap();
    let (train, eval) = split_train_eval(&data, 0.25, 9).unwrap();
    assert_eq!((train.len(), eval.len()), (45, 15));
    let ids = |d: &divrank::catalog::Dataset| d.requests.iter().map(|r| r.request_id.clone()).collect::<Vec<_>>();
    let (t, e) = (ids(&train), ids(&eval));
    assert!(t.iter().all(|x| !e.contains(x)));
    let (train2, _) = split_train_eval(&data, 0.25, 9).unwrap();
    assert_eq!(ids(&train2), t);
    let (train3, _) = split_train_eval(&data, 0.25, 10).unwrap();
    assert_ne!(ids(&train3), t);
}
