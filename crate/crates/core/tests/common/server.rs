//! One-thread HTTP/1.1 server for tests. Routes map a path (without query)
//! to a queue of `(status, body)` answers; the last answer repeats.
#![allow(dead_code)]

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

pub struct Request {
    pub method: String,
    pub target: String,
    pub body: String,
}

pub struct TestServer {
    pub base: String,
    pub log: Arc<Mutex<Vec<Request>>>,
}

pub fn serve(routes: Vec<(&str, Vec<(u16, String)>)>) -> TestServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let mut table: HashMap<String, (Vec<(u16, String)>, usize)> =
        routes.into_iter().map(|(p, a)| (p.to_string(), (a, 0))).collect();
    let log = Arc::new(Mutex::new(Vec::new()));
    let seen = Arc::clone(&log);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            if reader.read_line(&mut line).is_err() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let method = parts.next().unwrap_or_default().to_string();
            let target = parts.next().unwrap_or_default().to_string();
            let mut len = 0usize;
            loop {
                let mut h = String::new();
                if reader.read_line(&mut h).unwrap_or(0) == 0 || h == "\r\n" {
                    break;
                }
                if let Some((k, v)) = h.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                }
            }
            let mut body = vec![0u8; len];
            let _ = reader.read_exact(&mut body);
            let path = target.split('?').next().unwrap_or_default().to_string();
            seen.lock().unwrap().push(Request {
                method,
                target,
                body: String::from_utf8_lossy(&body).into_owned(),
            });
            let (status, text) = match table.get_mut(&path) {
                Some((answers, i)) => {
                    let a = answers[(*i).min(answers.len() - 1)].clone();
                    *i += 1;
                    a
                }
                None => (404, "not found".to_string()),
            };
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Length: {}\r\nContent-Type: application/json\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
        }
    });
    TestServer { base, log }
}
