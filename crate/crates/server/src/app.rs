//! HTTP/WebSocket front end. One thread owns the [`Session`] and paces it;
//! each client task talks to it through a command queue and reads the latest
//! snapshot from a watch channel.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::Response;
use axum::routing::get;
use axum::{Json, Router};
use stt_core::scenario::{Scenario, BUNDLED_SCENARIOS};
use tokio::net::TcpListener;
use tokio::sync::mpsc::error::TryRecvError;
use tokio::sync::{mpsc, oneshot, watch};

use crate::protocol::{parse_command, Frame};
use crate::session::{Command, CommandScript, Session, SessionConfig, SessionInfo, Snapshot};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ServerConfig {
    pub session: SessionConfig,
    /// Simulated seconds per wall-clock second.
    pub time_scale: f64,
    pub snapshot_hz: f64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { session: SessionConfig::default(), time_scale: 1.0, snapshot_hz: 30.0 }
    }
}

/// Latest published state. `info` is shared until the next reset.
#[derive(Debug)]
pub struct Published {
    pub info: Arc<SessionInfo>,
    pub snapshot: Snapshot,
}

enum Inbound {
    Command { client: u64, seq: u64, command: Command, reply: mpsc::UnboundedSender<Frame> },
    /// Current log as JSON lines plus the command script that reproduces it.
    Export(oneshot::Sender<(Vec<u8>, CommandScript)>),
}

#[derive(Clone)]
struct AppState {
    commands: mpsc::UnboundedSender<Inbound>,
    snapshots: watch::Receiver<Arc<Published>>,
    next_client: Arc<AtomicU64>,
}

/// Upper bound on ticks simulated between two queue polls.
const MAX_TICKS_PER_POLL: usize = 2000;

/// Starts the simulation thread and returns the router serving it. The
/// thread stops once the router and every connection are dropped.
pub fn router(scenario: Scenario, cfg: ServerConfig) -> stt_core::Result<Router> {
    if !(cfg.time_scale > 0.0 && cfg.time_scale.is_finite()) || !(cfg.snapshot_hz > 0.0 && cfg.snapshot_hz.is_finite()) {
        return Err(stt_core::Error::Config("time_scale and snapshot_hz must be positive".into()));
    }
    let mut session = Session::new(scenario, cfg.session)?;
    let first = Arc::new(Published { info: Arc::new(session.info()), snapshot: session.snapshot() });
    let (snap_tx, snap_rx) = watch::channel(first);
    let (cmd_tx, cmd_rx) = mpsc::unbounded_channel();
    std::thread::Builder::new()
        .name("stt-session".into())
        .spawn(move || run_loop(session, cfg, cmd_rx, snap_tx))
        .map_err(stt_core::Error::Io)?;
    let state = AppState { commands: cmd_tx, snapshots: snap_rx, next_client: Arc::new(AtomicU64::new(1)) };
    Ok(Router::new()
        .route("/session", get(session_ws))
        .route("/scenarios", get(scenarios))
        .route("/log", get(export_log))
        .route("/script", get(export_script))
        .with_state(state))
}

pub async fn serve(listener: TcpListener, scenario: Scenario, cfg: ServerConfig) -> std::io::Result<()> {
    let app = router(scenario, cfg).map_err(std::io::Error::other)?;
    log::info!("serving on {}", listener.local_addr()?);
    axum::serve(listener, app).await
}

fn run_loop(
    mut session: Session,
    cfg: ServerConfig,
    mut commands: mpsc::UnboundedReceiver<Inbound>,
    snapshots: watch::Sender<Arc<Published>>,
) {
    let period = Duration::from_secs_f64(1.0 / cfg.snapshot_hz);
    let mut info = Arc::new(session.info());
    let mut anchor = (Instant::now(), session.time());
    let mut last_publish = Instant::now();
    let mut published_rev = session.revision();
    let mut generation = session.generation();
    loop {
        loop {
            match commands.try_recv() {
                Ok(Inbound::Command { client, seq, command, reply }) => match session.submit(client, command) {
                    Ok(stamped) => drop(reply.send(Frame::accepted(seq, &stamped))),
                    Err(r) => {
                        log::debug!("client {client} command {seq} rejected: {r}");
                        drop(reply.send(Frame::rejected(seq, &r)));
                    }
                },
                Ok(Inbound::Export(reply)) => {
                    let mut buf = Vec::new();
                    session.log().write_jsonl(&mut buf).expect("write to memory");
                    drop(reply.send((buf, session.script())));
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => return,
            }
        }

        if !session.running() {
            if session.has_pending() {
                session.step();
            }
            anchor = (Instant::now(), session.time());
        } else {
            let target = anchor.1 + anchor.0.elapsed().as_secs_f64() * cfg.time_scale;
            let mut n = 0;
            while n < MAX_TICKS_PER_POLL && session.running() && session.time() + 0.5 * session.dt() <= target {
                session.step();
                n += 1;
                if session.generation() != generation {
                    break;
                }
            }
        }
        if session.generation() != generation {
            generation = session.generation();
            info = Arc::new(session.info());
            anchor = (Instant::now(), session.time());
        }

        if session.revision() != published_rev && last_publish.elapsed() >= period {
            published_rev = session.revision();
            last_publish = Instant::now();
            snapshots.send_replace(Arc::new(Published { info: info.clone(), snapshot: session.snapshot() }));
        }
        std::thread::sleep(Duration::from_millis(1));
    }
}

async fn scenarios() -> Json<Vec<&'static str>> {
    Json(BUNDLED_SCENARIOS.iter().map(|(name, _)| *name).collect())
}

async fn export(app: &AppState) -> Result<(Vec<u8>, CommandScript), StatusCode> {
    let (tx, rx) = oneshot::channel();
    app.commands.send(Inbound::Export(tx)).map_err(|_| StatusCode::SERVICE_UNAVAILABLE)?;
    rx.await.map_err(|_| StatusCode::SERVICE_UNAVAILABLE)
}

/// Log of the running episode so far, as JSON lines.
async fn export_log(State(app): State<AppState>) -> Result<Vec<u8>, StatusCode> {
    Ok(export(&app).await?.0)
}

/// Script that reproduces the running episode with `replay`.
async fn export_script(State(app): State<AppState>) -> Result<Json<CommandScript>, StatusCode> {
    Ok(Json(export(&app).await?.1))
}

async fn session_ws(ws: WebSocketUpgrade, State(app): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| client(socket, app))
}

async fn send(socket: &mut WebSocket, frame: &Frame) -> bool {
    socket.send(Message::Text(frame.to_text().into())).await.is_ok()
}

async fn client(mut socket: WebSocket, app: AppState) {
    let id = app.next_client.fetch_add(1, Ordering::Relaxed);
    let mut snapshots = app.snapshots.clone();
    let (reply_tx, mut replies) = mpsc::unbounded_channel();
    let latest = snapshots.borrow_and_update().clone();
    let mut info = latest.info.clone();
    if !send(&mut socket, &Frame::hello(id, &info)).await || !send(&mut socket, &Frame::snapshot(&latest.snapshot)).await {
        return;
    }
    log::info!("client {id} connected");
    loop {
        tokio::select! {
            changed = snapshots.changed() => {
                if changed.is_err() {
                    break;
                }
                let latest = snapshots.borrow_and_update().clone();
                if !Arc::ptr_eq(&latest.info, &info) {
                    info = latest.info.clone();
                    if !send(&mut socket, &Frame::hello(id, &info)).await {
                        break;
                    }
                }
                if !send(&mut socket, &Frame::snapshot(&latest.snapshot)).await {
                    break;
                }
            }
            Some(frame) = replies.recv() => {
                if !send(&mut socket, &frame).await {
                    break;
                }
            }
            msg = socket.recv() => match msg {
                Some(Ok(Message::Text(text))) => match parse_command(text.as_str()) {
                    Ok((seq, command)) => {
                        let inbound = Inbound::Command { client: id, seq, command, reply: reply_tx.clone() };
                        if app.commands.send(inbound).is_err() {
                            break;
                        }
                    }
                    Err(frame) => {
                        if !send(&mut socket, &frame).await {
                            break;
                        }
                    }
                },
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                Some(Ok(_)) => {}
            },
        }
    }
    log::info!("client {id} disconnected");
}
