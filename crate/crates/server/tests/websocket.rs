use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use stt_core::scenario::{bundled_scenario, Scenario};
use stt_server::{replay, router, CommandScript, ServerConfig, SessionConfig};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

async fn start(time_scale: f64) -> String {
    let sc = Scenario::from_json(bundled_scenario("crossing_2d.json").unwrap()).unwrap();
    let app = router(sc, ServerConfig { time_scale, ..ServerConfig::default() }).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    addr
}

async fn connect(addr: &str) -> Ws {
    connect_async(format!("ws://{addr}/session")).await.unwrap().0
}

async fn next_frame(ws: &mut Ws) -> Value {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(10), ws.next()).await.expect("frame within 10 s").unwrap().unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(t.as_str()).unwrap();
        }
    }
}

/// Reads frames until one of type `kind` arrives.
async fn next_of(ws: &mut Ws, kind: &str) -> Value {
    loop {
        let f = next_frame(ws).await;
        if f["type"] == kind {
            return f;
        }
    }
}

async fn send(ws: &mut Ws, seq: u64, payload: Value) {
    let frame = json!({"type": "command", "seq": seq, "payload": payload});
    ws.send(Message::Text(frame.to_string().into())).await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn hello_then_increasing_snapshots() {
    let addr = start(20.0).await;
    let mut ws = connect(&addr).await;
    let hello = next_frame(&mut ws).await;
    assert_eq!(hello["type"], "hello");
    assert_eq!(hello["payload"]["scenario"], "crossing_2d");
    assert_eq!(hello["payload"]["dims"], 2);
    assert!(hello["payload"]["client"].as_u64().unwrap() >= 1);
    let mut last_seq = 0;
    let mut last_t = -1.0;
    for _ in 0..10 {
        let f = next_of(&mut ws, "snapshot").await;
        let seq = f["seq"].as_u64().unwrap();
        assert!(seq > last_seq);
        assert_eq!(f["payload"]["seq"], f["seq"]);
        let t = f["payload"]["t"].as_f64().unwrap();
        assert!(t >= last_t);
        last_seq = seq;
        last_t = t;
    }
    assert!(last_t > 0.0, "simulation time did not advance");
}

#[tokio::test(flavor = "multi_thread")]
async fn errors_go_only_to_the_sender() {
    let addr = start(1.0).await;
    let mut a = connect(&addr).await;
    let mut b = connect(&addr).await;
    send(&mut a, 41, json!({"kind": "set_param", "path": "tube.k1", "value": 0.01})).await;
    let err = next_of(&mut a, "error").await;
    assert_eq!(err["seq"], 41);
    assert_eq!(err["payload"]["code"], "bad_value");

    send(&mut a, 42, json!({"kind": "set_param", "path": "plant.mass", "value": 2})).await;
    assert_eq!(next_of(&mut a, "error").await["payload"]["code"], "not_whitelisted");
    a.send(Message::Text("{\"type\":\"command\"".into())).await.unwrap();
    assert_eq!(next_of(&mut a, "error").await["payload"]["code"], "malformed_frame");

    // b keeps receiving snapshots and never sees a's errors.
    for _ in 0..15 {
        let f = next_frame(&mut b).await;
        assert_ne!(f["type"], "error");
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn accepted_commands_are_echoed_and_applied() {
    let addr = start(5.0).await;
    let mut ws = connect(&addr).await;
    send(&mut ws, 1, json!({"kind": "drag_obstacle", "id": 3, "position": [2.0, 3.0]})).await;
    let echo = next_of(&mut ws, "command").await;
    assert_eq!(echo["seq"], 1);
    assert_eq!(echo["payload"]["command"]["kind"], "drag_obstacle");
    let tick = echo["payload"]["tick"].as_u64().unwrap();
    loop {
        let f = next_of(&mut ws, "snapshot").await;
        if f["payload"]["tick"].as_u64().unwrap() > tick + 2 {
            let ob = f["payload"]["obstacles"].as_array().unwrap().iter().find(|o| o["id"] == 3).unwrap().clone();
            assert_eq!(ob["dragged"], true);
            break;
        }
    }

    send(&mut ws, 2, json!({"kind": "pause"})).await;
    next_of(&mut ws, "command").await;
    tokio::time::sleep(Duration::from_millis(200)).await;
    let mut latest = next_of(&mut ws, "snapshot").await;
    while latest["payload"]["paused"] != true {
        latest = next_of(&mut ws, "snapshot").await;
    }
    tokio::time::sleep(Duration::from_millis(300)).await;
    send(&mut ws, 3, json!({"kind": "resume"})).await;
    next_of(&mut ws, "command").await;
    let resumed = next_of(&mut ws, "snapshot").await;
    // 300 ms paused at 5x would be 1500 ticks; only the post-resume ticks may show.
    let gap = resumed["payload"]["tick"].as_u64().unwrap() - latest["payload"]["tick"].as_u64().unwrap();
    assert!(gap < 500, "time advanced while paused ({gap} ticks)");
}

#[tokio::test(flavor = "multi_thread")]
async fn reset_sends_a_new_hello() {
    let addr = start(5.0).await;
    let mut ws = connect(&addr).await;
    next_of(&mut ws, "hello").await;
    send(&mut ws, 5, json!({"kind": "reset", "scenario": "quad_slalom.json"})).await;
    next_of(&mut ws, "command").await;
    let hello = next_of(&mut ws, "hello").await;
    assert_eq!(hello["payload"]["scenario"], "quad_slalom");
    assert_eq!(hello["payload"]["dims"], 3);
    let snap = next_of(&mut ws, "snapshot").await;
    assert_eq!(snap["payload"]["sigma"].as_array().unwrap().len(), 3);
}

async fn http_get(addr: &str, path: &str) -> String {
    let mut stream = TcpStream::connect(addr).await.unwrap();
    let req = format!("GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n");
    stream.write_all(req.as_bytes()).await.unwrap();
    let mut resp = String::new();
    stream.read_to_string(&mut resp).await.unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    resp.split_once("\r\n\r\n").unwrap().1.to_string()
}

#[tokio::test(flavor = "multi_thread")]
async fn exported_script_replays_to_the_live_log() {
    let addr = start(60.0).await;
    let mut ws = connect(&addr).await;
    send(&mut ws, 1, json!({"kind": "drag_obstacle", "id": 3, "position": [2.5, 3.5]})).await;
    next_of(&mut ws, "command").await;
    send(&mut ws, 2, json!({"kind": "set_param", "path": "tube.k3", "value": 0.7})).await;
    next_of(&mut ws, "command").await;
    while next_of(&mut ws, "snapshot").await["payload"]["finished"] != true {}
    let live = http_get(&addr, "/log").await;
    let script: CommandScript = serde_json::from_str(&http_get(&addr, "/script").await).unwrap();
    assert_eq!(script.commands.len(), 2);
    let replayed = replay(&script, SessionConfig::default()).unwrap();
    let mut buf = Vec::new();
    replayed.write_jsonl(&mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap() == live, "replayed log differs from the live log");
}

#[tokio::test(flavor = "multi_thread")]
async fn scenarios_endpoint_lists_bundles() {
    let addr = start(1.0).await;
    let body = http_get(&addr, "/scenarios").await;
    let names: Vec<String> = serde_json::from_str(&body).unwrap();
    assert!(names.contains(&"mobile_robot.json".to_string()));
    assert!(names.contains(&"quadrotor.json".to_string()));
}
