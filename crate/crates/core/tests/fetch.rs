//! Exercises `fetch_mnist` against a local single-threaded HTTP
//! fixture server: happy path, cached-file short circuit, and the
//! corrupt-download error paths.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::thread;

use flate2::write::GzEncoder;
use flate2::Compression;

use conceptree::data::{load_mnist, fetch_mnist, Split};
use conceptree::Error;

const FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

fn idx_images(count: u8) -> Vec<u8> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&0x0803u32.to_be_bytes());
    bytes.extend_from_slice(&(count as u32).to_be_bytes());
    bytes.extend_from_slice(&2u32.to_be_bytes());
    bytes.extend_from_slice(&2u32.to_be_bytes());
    bytes.extend(std::iter::repeat(7u8).take(count as usize * 4));
    bytes
}

fn idx_labels(count: u8) -> Vec<u8> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&0x0801u32.to_be_bytes());
    bytes.extend_from_slice(&(count as u32).to_be_bytes());
    bytes.extend((0..count).map(|i| i % 2));
    bytes
}

fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap()
}

/// Serves the given path->body map over HTTP on a fresh local port and
/// returns the base URL. The server thread exits with the process.
fn serve(routes: HashMap<String, Vec<u8>>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut request = Vec::new();
            let mut buf = [0u8; 1024];
            while !request.windows(4).any(|w| w == b"\r\n\r\n") {
                match stream.read(&mut buf) {
                    Ok(0) | Err(_) => break,
                    Ok(n) => request.extend_from_slice(&buf[..n]),
                }
            }
            let path = std::str::from_utf8(&request)
                .ok()
                .and_then(|text| text.split_whitespace().nth(1))
                .unwrap_or("/")
                .to_string();
            let response = match routes.get(&path) {
                Some(body) => {
                    let mut r = format!(
                        "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                        body.len()
                    )
                    .into_bytes();
                    r.extend_from_slice(body);
                    r
                }
                None => b"HTTP/1.1 404 Not Found\r\nContent-Length: 0\r\nConnection: close\r\n\r\n"
                    .to_vec(),
            };
            let _ = stream.write_all(&response);
        }
    });
    base
}

fn fixture_routes() -> HashMap<String, Vec<u8>> {
    let bodies = [idx_images(2), idx_labels(2), idx_images(1), idx_labels(1)];
    FILES
        .iter()
        .zip(bodies)
        .map(|(name, body)| (format!("/{name}.gz"), gzip(&body)))
        .collect()
}

#[test]
fn fetches_gunzips_and_caches() {
    let base = serve(fixture_routes());
    let dir = tempfile::tempdir().unwrap();
    let paths = fetch_mnist(&base, dir.path()).unwrap();
    assert_eq!(paths.len(), 4);
    let train = load_mnist(dir.path(), Split::Train).unwrap();
    assert_eq!((train.len(), train.features.cols()), (2, 4));

    // present-and-valid files are kept: refetching against a dead
    // server succeeds without touching the network
    let fetched = fetch_mnist("http://127.0.0.1:1", dir.path()).unwrap();
    assert_eq!(fetched, paths);
}

#[test]
fn corrupt_gzip_is_a_fetch_error_with_no_partial_file() {
    let mut routes = fixture_routes();
    routes.insert(format!("/{}.gz", FILES[0]), b"not gzip at all".to_vec());
    let base = serve(routes);
    let dir = tempfile::tempdir().unwrap();
    match fetch_mnist(&base, dir.path()) {
        Err(Error::Fetch(message)) => assert!(message.contains("gunzip"), "{message}"),
        other => panic!("corrupt gzip gave {other:?}"),
    }
    assert!(!dir.path().join(FILES[0]).exists());
}

#[test]
fn wrong_magic_is_rejected() {
    let mut routes = fixture_routes();
    routes.insert(format!("/{}.gz", FILES[1]), gzip(&[0u8; 16]));
    let base = serve(routes);
    let dir = tempfile::tempdir().unwrap();
    match fetch_mnist(&base, dir.path()) {
        Err(Error::Fetch(message)) => assert!(message.contains("magic"), "{message}"),
        other => panic!("bad magic gave {other:?}"),
    }
}

#[test]
fn missing_file_is_a_fetch_error() {
    let mut routes = fixture_routes();
    routes.remove(&format!("/{}.gz", FILES[3]));
    let base = serve(routes);
    let dir = tempfile::tempdir().unwrap();
    match fetch_mnist(&base, dir.path()) {
        Err(Error::Fetch(message)) => assert!(message.contains("GET"), "{message}"),
        other => panic!("404 gave {other:?}"),
    }
}
