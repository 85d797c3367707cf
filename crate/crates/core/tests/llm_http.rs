use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use coldaug::dataset::{Catalog, ItemMeta};
use coldaug::numerics::RngStream;
use coldaug::oracle::{ChatTransport, HttpTransport, LlmConfig, LlmOracle, PreferenceOracle, PreferenceQuery};
use coldaug::Error;

/// Serves one scripted `(status, body)` per connection and records each
/// request body.
fn stub(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = thread::spawn(move || {
        for (status, body) in script {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = line.trim().to_owned();
                }
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut req = vec![0; len];
            reader.read_exact(&mut req).unwrap();
            log.lock().unwrap().push(format!("{auth}\n{}", String::from_utf8(req).unwrap()));
            let mut out = stream;
            write!(out, "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len()).unwrap();
        }
    });
    (url, seen, handle)
}

fn reply(text: &str) -> String {
    format!(r#"{{"choices":[{{"message":{{"role":"assistant","content":"{text}"}}}}]}}"#)
}

fn catalog() -> Catalog {
    ["h1", "c1", "c2"]
        .into_iter()
        .map(|i| (i.into(), ItemMeta { item: i.into(), title: format!("Title of {i}"), ..Default::default() }))
        .collect()
}

fn config(url: String) -> LlmConfig {
    LlmConfig { url, model: "stub-model".into(), token_env: Some("COLDAUG_TEST_TOKEN".into()), timeout_secs: 5, retries: 2, ..LlmConfig::default() }
}

#[test]
fn posts_chat_request_and_reads_reply() {
    std::env::set_var("COLDAUG_TEST_TOKEN", "secret");
    let (url, seen, h) = stub(vec![(200, reply(" B"))]);
    let t = HttpTransport::new(&config(url));
    assert_eq!(t.complete("hello").unwrap(), " B");
    h.join().unwrap();
    let req = seen.lock().unwrap()[0].replace(": ", ":");
    assert!(req.contains("Bearer secret"), "{req}");
    assert!(req.contains(r#""model":"stub-model""#), "{req}");
    assert!(req.contains(r#""role":"user""#));
    assert!(req.contains(r#""content":"hello""#));
    assert!(req.contains(r#""temperature":0"#));
}

#[test]
fn oracle_retries_server_errors_and_garbage() {
    let (url, seen, h) = stub(vec![(500, "{}".into()), (200, reply("maybe")), (200, reply("Answer: A"))]);
    let cat = catalog();
    let oracle = LlmOracle::new(HttpTransport::new(&config(url)), &cat, &config(String::new()));
    let q = PreferenceQuery::new("u".into(), vec!["h1".into()], "c1".into(), "c2".into()).unwrap();
    let got = oracle.choose(&q, &mut RngStream::new(0, 0)).unwrap();
    h.join().unwrap();
    assert_eq!(got.as_str(), "c1");
    assert_eq!(oracle.retry_count(), 2);
    let prompts = seen.lock().unwrap();
    assert_eq!(prompts.len(), 3);
    assert!(prompts[0].contains("Title of h1") && prompts[0].contains("Title of c2"));
}

#[test]
fn oracle_gives_up_after_retries() {
    let (url, _, h) = stub(vec![(503, "{}".into()); 3]);
    let cat = catalog();
    let oracle = LlmOracle::new(HttpTransport::new(&config(url)), &cat, &config(String::new()));
    let q = PreferenceQuery::new("u".into(), vec!["h1".into()], "c1".into(), "c2".into()).unwrap();
    let err = oracle.choose(&q, &mut RngStream::new(0, 0)).unwrap_err();
    h.join().unwrap();
    assert!(matches!(err, Error::Transport(_)), "{err}");
}
