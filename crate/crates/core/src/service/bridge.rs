//! WebSocket bridge between the operator console and the session actor.
//!
//! The session runs on its own thread and owns all state. Commands reach it
//! over a channel; telemetry leaves through a broadcast channel that drops
//! stale snapshots for slow clients instead of queueing them.

use super::messages::{parse_inbound, OperatorCommand, Outbound};
use super::session::Session;
use super::workflow::WorkflowStep;
use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use std::io;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};
use tokio::sync::{broadcast, mpsc as tmpsc, watch};
use tower_http::services::ServeDir;

pub struct SessionInput {
    pub command: OperatorCommand,
    pub reply: tmpsc::UnboundedSender<String>,
}

/// Client-side handles to a running session actor.
#[derive(Clone)]
pub struct ActorHandle {
    pub commands: mpsc::Sender<SessionInput>,
    pub telemetry: broadcast::Sender<Arc<str>>,
    pub state: watch::Receiver<WorkflowStep>,
    pub stop: Arc<AtomicBool>,
}

/// Runs `session` on its own thread. With `realtime` each tick is paced to
/// the wall clock; otherwise ticks run back to back.
pub fn spawn_actor(mut session: Session, realtime: bool) -> (ActorHandle, JoinHandle<io::Result<Session>>) {
    let (cmd_tx, cmd_rx) = mpsc::channel::<SessionInput>();
    let (tel_tx, _) = broadcast::channel::<Arc<str>>(4);
    let (state_tx, state_rx) = watch::channel(session.workflow().step);
    let stop = Arc::new(AtomicBool::new(false));
    let handle = ActorHandle {
        commands: cmd_tx,
        telemetry: tel_tx.clone(),
        state: state_rx,
        stop: stop.clone(),
    };
    let join = std::thread::Builder::new()
        .name("session".into())
        .spawn(move || {
            let start = Instant::now();
            let t0 = session.now_ns();
            while !stop.load(Ordering::Relaxed) {
                loop {
                    match cmd_rx.try_recv() {
                        Ok(input) => {
                            let reply = session.handle_command(input.command);
                            input.reply.send(reply.to_json()).ok();
                        }
                        Err(mpsc::TryRecvError::Empty) => break,
                        Err(mpsc::TryRecvError::Disconnected) => {
                            session.flush()?;
                            return Ok(session);
                        }
                    }
                }
                session.step()?;
                state_tx.send_replace(session.workflow().step);
                if let Some(t) = session.take_telemetry() {
                    tel_tx.send(Arc::from(Outbound::Telemetry(t).to_json())).ok();
                }
                if realtime {
                    let due = start + Duration::from_nanos(session.now_ns() - t0);
                    if let Some(wait) = due.checked_duration_since(Instant::now()) {
                        std::thread::sleep(wait);
                    }
                }
            }
            session.flush()?;
            Ok(session)
        })
        .expect("spawn session thread");
    (handle, join)
}

/// HTTP router: `/ws` for the bridge, everything else from `ui_dir`.
pub fn router(handle: ActorHandle, ui_dir: Option<PathBuf>) -> Router {
    let r = Router::new().route("/ws", get(ws_upgrade)).with_state(handle);
    match ui_dir {
        Some(dir) => r.fallback_service(ServeDir::new(dir)),
        None => r,
    }
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(h): State<ActorHandle>) -> Response {
    ws.on_upgrade(move |socket| client(socket, h))
}

async fn client(mut socket: WebSocket, h: ActorHandle) {
    let mut telemetry = h.telemetry.subscribe();
    let (reply_tx, mut replies) = tmpsc::unbounded_channel::<String>();
    loop {
        let out: String = tokio::select! {
            msg = socket.recv() => match msg {
                Some(Ok(WsMessage::Text(text))) => match parse_inbound(&text) {
                    Ok(command) => {
                        let input = SessionInput { command, reply: reply_tx.clone() };
                        if h.commands.send(input).is_err() {
                            break;
                        }
                        continue;
                    }
                    Err(e) => Outbound::error(e, *h.state.borrow()).to_json(),
                },
                Some(Ok(WsMessage::Binary(_))) => {
                    Outbound::error("binary messages are not supported", *h.state.borrow()).to_json()
                }
                Some(Ok(WsMessage::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => continue,
            },
            Some(r) = replies.recv() => r,
            t = telemetry.recv() => match t {
                Ok(t) => t.to_string(),
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => break,
            },
        };
        if socket.send(WsMessage::Text(out.into())).await.is_err() {
            break;
        }
    }
}

/// Serves the bridge on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    handle: ActorHandle,
    ui_dir: Option<PathBuf>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    axum::serve(listener, router(handle, ui_dir))
        .with_graceful_shutdown(shutdown)
        .await
}
