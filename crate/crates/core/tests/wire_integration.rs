mod common;

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use sg_core::wire::{
    decode_message, rpc_call, serve, Message, RpcErrorCode, Router,
};

use common::checks;

fn echo_router() -> Router {
    Router::new()
        .raw("ping", |_| Ok(Value::Bool(true)))
        .raw("echo", |p| Ok(Value::Object(p)))
}

#[test]
fn fifty_concurrent_pings_match_their_ids() {
    let server = serve("127.0.0.1:0", echo_router()).unwrap();
    let addr = Arc::new(server.address());
    let handles: Vec<_> = (0..50)
        .map(|i| {
            let addr = Arc::clone(&addr);
            thread::spawn(move || {
                let got = rpc_call(&addr, "echo", json!({ "n": i }), Duration::from_secs(5)).unwrap();
                assert_eq!(got, json!({ "n": i }));
                rpc_call(&addr, "ping", json!({}), Duration::from_secs(5)).unwrap()
            })
        })
        .collect();
    let ok = handles
        .into_iter()
        .map(|h| h.join().unwrap())
        .filter(|v| *v == Value::Bool(true))
        .count();
    assert_eq!(ok, 50);
}

#[test]
fn one_connection_carries_many_requests_in_order() {
    let server = serve("127.0.0.1:0", echo_router()).unwrap();
    let mut stream = TcpStream::connect(server.local_addr()).unwrap();
    let mut batch = Vec::new();
    for i in 0..20 {
        batch.extend_from_slice(format!("{{\"id\":\"r{i}\",\"method\":\"echo\",\"params\":{{\"i\":{i}}}}}\n").as_bytes());
    }
    stream.write_all(&batch).unwrap();
    let mut reader = BufReader::new(stream);
    for i in 0..20 {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        match decode_message(line.trim_end_matches('\n').as_bytes()).unwrap() {
            Message::Response(r) => {
                assert_eq!(r.id, format!("r{i}"));
                assert_eq!(r.outcome.unwrap(), json!({ "i": i }));
            }
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn server_survives_garbage_and_reports_errors() {
    let server = serve("127.0.0.1:0", echo_router()).unwrap();
    let mut stream = TcpStream::connect(server.local_addr()).unwrap();
    stream
        .write_all(b"\xff\xfe not json\n{\"id\":\"7\",\"method\":\"nope\",\"params\":{}}\n")
        .unwrap();
    let mut reader = BufReader::new(stream);
    let mut codes = Vec::new();
    for _ in 0..2 {
        let mut line = Vec::new();
        reader.read_until(b'\n', &mut line).unwrap();
        line.pop();
        match decode_message(&line).unwrap() {
            Message::Response(r) => codes.push(r.outcome.unwrap_err().code),
            other => panic!("{other:?}"),
        }
    }
    assert_eq!(codes, [RpcErrorCode::Malformed, RpcErrorCode::UnknownMethod]);
    assert_eq!(
        rpc_call(&server.address(), "ping", json!({}), Duration::from_secs(2)).unwrap(),
        Value::Bool(true)
    );
}

#[test]
fn generated_messages_round_trip() {
    checks::wire_round_trip(1, 2000).unwrap();
}

#[test]
fn decoder_never_panics() {
    checks::wire_fuzz(2, 3000).unwrap();
}
