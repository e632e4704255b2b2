//! Remote captioner against a local mock HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use spectra_core::data::caption::{CaptionMetadata, CaptionProvider, CaptionRequest, RemoteCaptioner};
use spectra_core::data::msi::SENTINEL2_BANDS;
use spectra_core::Error;

struct Reply {
    status: u16,
    body: &'static str,
    delay: Duration,
}

/// Serves `replies` in order, one per connection, recording request bodies.
fn serve(replies: Vec<Reply>) -> (String, Arc<Mutex<Vec<Vec<u8>>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/caption", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for reply in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(body);
            thread::sleep(reply.delay);
            let mut s = stream;
            let _ = write!(
                s,
                "HTTP/1.1 {} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                reply.status,
                reply.body.len(),
                reply.body
            );
        }
    });
    (url, seen)
}

fn reply(status: u16, body: &'static str) -> Reply {
    Reply {
        status,
        body,
        delay: Duration::ZERO,
    }
}

fn meta() -> CaptionMetadata {
    CaptionMetadata {
        id: "img_00001".into(),
        labels: vec!["forest".into()],
        height: 4,
        width: 4,
        bands: SENTINEL2_BANDS.to_vec(),
    }
}

const PNG: &[u8] = b"\x89PNG\r\n\x1a\nfake";

fn client(url: &str) -> RemoteCaptioner {
    RemoteCaptioner::new(url, Duration::from_millis(500))
        .unwrap()
        .with_retry(3, Duration::from_millis(10))
}

#[test]
fn happy_path_passes_caption_through() {
    let (url, seen) = serve(vec![reply(200, r#"{"caption":"Dense  forest,\nnear a río."}"#)]);
    let m = meta();
    let text = client(&url)
        .caption(&CaptionRequest {
            metadata: &m,
            png: Some(PNG),
        })
        .unwrap();
    assert_eq!(text, "Dense  forest,\nnear a río.");
    let body = String::from_utf8_lossy(&seen.lock().unwrap()[0]).into_owned();
    assert!(body.contains("name=\"image\""));
    assert!(body.contains("image/png"));
    assert!(body.contains("name=\"metadata\""));
    assert!(body.contains("application/json"));
    assert!(body.contains("\"labels\":[\"forest\"]"));
}

#[test]
fn three_server_errors_exhaust_retries() {
    let (url, seen) = serve(vec![reply(500, "{}"), reply(500, "{}"), reply(500, "{}")]);
    let m = meta();
    let err = client(&url)
        .caption(&CaptionRequest {
            metadata: &m,
            png: Some(PNG),
        })
        .unwrap_err();
    match err {
        Error::RetryExhausted { attempts, last } => {
            assert_eq!(attempts, 3);
            assert!(matches!(*last, Error::CaptionStatus(500)));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn recovers_after_transient_failure() {
    let (url, _) = serve(vec![reply(503, ""), reply(200, r#"{"caption":"ok"}"#)]);
    let m = meta();
    let text = client(&url)
        .caption(&CaptionRequest {
            metadata: &m,
            png: Some(PNG),
        })
        .unwrap();
    assert_eq!(text, "ok");
}

#[test]
fn client_error_is_not_retried() {
    let (url, seen) = serve(vec![reply(404, "")]);
    let m = meta();
    let err = client(&url)
        .caption(&CaptionRequest {
            metadata: &m,
            png: Some(PNG),
        })
        .unwrap_err();
    assert!(matches!(err, Error::CaptionStatus(404)));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_body_is_distinct() {
    let (url, _) = serve(vec![reply(200, r#"{"text":"no caption key"}"#)]);
    let m = meta();
    let err = client(&url)
        .caption(&CaptionRequest {
            metadata: &m,
            png: Some(PNG),
        })
        .unwrap_err();
    assert!(matches!(err, Error::CaptionMalformed(_)));
}

#[test]
fn slow_server_times_out() {
    let slow = || Reply {
        status: 200,
        body: r#"{"caption":"late"}"#,
        delay: Duration::from_millis(1500),
    };
    let (url, _) = serve(vec![slow(), slow()]);
    let m = meta();
    let err = RemoteCaptioner::new(&url, Duration::from_millis(200))
        .unwrap()
        .with_retry(2, Duration::from_millis(1))
        .caption(&CaptionRequest {
            metadata: &m,
            png: Some(PNG),
        })
        .unwrap_err();
    match err {
        Error::RetryExhausted { attempts: 2, last } => assert!(matches!(*last, Error::CaptionTimeout), "{last:?}"),
        other => panic!("unexpected {other:?}"),
    }
}
