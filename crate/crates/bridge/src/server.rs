//! Live session service.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use breathsteer::session::{HandleCommand, LiveOperator, OperatorProfile, Scenario, Session, SessionReport, StateSnapshot};
use futures_util::{SinkExt, StreamExt};
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio_tungstenite::tungstenite::Message as WsMessage;
use tokio_tungstenite::WebSocketStream;
use tracing::{debug, info, warn};

use crate::protocol::{decode, encode, ErrorCode, Message, Role};

pub const DEFAULT_PORT: u16 = 8732;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServeConfig {
    pub port: u16,
    /// Snapshots per second of session time.
    pub publish_hz: f64,
    /// Session seconds per wall-clock second.
    pub speed: f64,
    pub command_queue: usize,
    pub observer_queue: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            port: DEFAULT_PORT,
            publish_hz: 60.0,
            speed: 1.0,
            command_queue: 256,
            observer_queue: 64,
        }
    }
}

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("cannot listen on port {port}: {source}")]
    Bind { port: u16, source: std::io::Error },
    #[error(transparent)]
    Session(#[from] breathsteer::Error),
    #[error("invalid bridge configuration: {0}")]
    Config(String),
}

struct Shared {
    operator_present: AtomicBool,
    shutdown: AtomicBool,
    /// Lossless snapshot route to the connected operator.
    operator_tx: Mutex<Option<mpsc::Sender<StateSnapshot>>>,
    observers: broadcast::Sender<StateSnapshot>,
    commands: SyncSender<HandleCommand>,
}

/// A running service.
pub struct BridgeHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    done: Option<oneshot::Receiver<Result<SessionReport, breathsteer::Error>>>,
    accept: tokio::task::JoinHandle<()>,
}

impl BridgeHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Wait for the session to finish.
    pub async fn finished(&mut self) -> Result<SessionReport, BridgeError> {
        let rx = self
            .done
            .take()
            .ok_or_else(|| BridgeError::Config("session result already taken".into()))?;
        match rx.await {
            Ok(r) => Ok(r?),
            Err(_) => Err(BridgeError::Config("session thread stopped".into())),
        }
    }

    pub fn shutdown(&self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        self.accept.abort();
    }
}

impl Drop for BridgeHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Start serving a live session of `scenario`. Must be called inside a tokio
/// runtime. The session only advances while an operator is connected.
pub async fn serve(scenario: Scenario, cfg: ServeConfig) -> Result<BridgeHandle, BridgeError> {
    if !(cfg.publish_hz > 0.0 && cfg.speed > 0.0 && cfg.command_queue > 0 && cfg.observer_queue > 0) {
        return Err(BridgeError::Config("rates and queue sizes must be positive".into()));
    }
    if scenario.operator != OperatorProfile::Live {
        return Err(BridgeError::Config(format!(
            "a served session needs the live operator, not `{}`",
            scenario.operator
        )));
    }
    let (cmd_tx, cmd_rx) = sync_channel(cfg.command_queue);
    let operator = LiveOperator::new(cmd_rx, scenario.operator_params);
    let session = Session::with_operator(scenario, Box::new(operator))?;

    let listener = TcpListener::bind(("127.0.0.1", cfg.port))
        .await
        .map_err(|source| BridgeError::Bind { port: cfg.port, source })?;
    let addr = listener.local_addr().map_err(|source| BridgeError::Bind { port: cfg.port, source })?;
    info!(%addr, "bridge listening");

    let (observers, _) = broadcast::channel(cfg.observer_queue);
    let shared = Arc::new(Shared {
        operator_present: AtomicBool::new(false),
        shutdown: AtomicBool::new(false),
        operator_tx: Mutex::new(None),
        observers,
        commands: cmd_tx,
    });

    let (done_tx, done_rx) = oneshot::channel();
    {
        let shared = shared.clone();
        thread::Builder::new()
            .name("session-ticker".into())
            .spawn(move || {
                let result = run_ticker(session, &shared, cfg);
                let _ = done_tx.send(result);
            })
            .map_err(|e| BridgeError::Config(format!("cannot start session thread: {e}")))?;
    }

    let accept = {
        let shared = shared.clone();
        tokio::spawn(async move {
            loop {
                match listener.accept().await {
                    Ok((stream, peer)) => {
                        let shared = shared.clone();
                        tokio::spawn(async move {
                            if let Err(e) = handle_connection(stream, shared).await {
                                debug!(%peer, "connection closed: {e}");
                            }
                        });
                    }
                    Err(e) => warn!("accept failed: {e}"),
                }
            }
        })
    };

    Ok(BridgeHandle {
        addr,
        shared,
        done: Some(done_rx),
        accept,
    })
}

/// Single writer of the session. Advances session time in step with the wall
/// clock while an operator is present and publishes snapshots on the
/// session-time grid.
fn run_ticker(mut session: Session, shared: &Shared, cfg: ServeConfig) -> Result<SessionReport, breathsteer::Error> {
    let publish_dt = 1.0 / cfg.publish_hz;
    let mut last_published = f64::NEG_INFINITY;
    let mut next_publish = 0.0;
    let mut anchor: Option<(Instant, f64)> = None;

    let publish = |snap: StateSnapshot, last: &mut f64| {
        if snap.t <= *last {
            return;
        }
        *last = snap.t;
        let _ = shared.observers.send(snap.clone());
        let mut slot = shared.operator_tx.lock().expect("operator slot lock");
        if let Some(tx) = slot.as_ref() {
            // the operator never loses a snapshot; a slow operator slows the session
            if tx.blocking_send(snap).is_err() {
                *slot = None;
            }
        }
    };

    while !session.is_done() {
        if shared.shutdown.load(Ordering::SeqCst) {
            return Err(breathsteer::Error::InvalidState("bridge shut down before the session finished".into()));
        }
        if !shared.operator_present.load(Ordering::SeqCst) {
            anchor = None;
            thread::sleep(Duration::from_millis(5));
            continue;
        }
        let (wall0, sim0) = *anchor.get_or_insert((Instant::now(), session.time()));
        let target = sim0 + wall0.elapsed().as_secs_f64() * cfg.speed;
        while session.time() < target && !session.is_done() {
            session.tick()?;
            if session.time() + 1e-9 >= next_publish {
                publish(session.snapshot(), &mut last_published);
                while next_publish <= session.time() + 1e-9 {
                    next_publish += publish_dt;
                }
            }
            if !shared.operator_present.load(Ordering::SeqCst) {
                break;
            }
        }
        thread::sleep(Duration::from_millis(2));
    }
    publish(session.snapshot(), &mut last_published);
    Ok(session.into_report())
}

type Ws = WebSocketStream<TcpStream>;

async fn send(ws: &mut Ws, msg: &Message) -> Result<(), tokio_tungstenite::tungstenite::Error> {
    ws.send(WsMessage::Text(encode(msg).into())).await
}

async fn handle_connection(stream: TcpStream, shared: Arc<Shared>) -> Result<(), tokio_tungstenite::tungstenite::Error> {
    let mut ws = tokio_tungstenite::accept_async(stream).await?;

    let role = loop {
        let Some(msg) = ws.next().await else {
            return Ok(());
        };
        match msg? {
            WsMessage::Text(text) => match decode(text.as_str()) {
                Ok(Message::Hello { role }) => break role,
                Ok(_) => send(&mut ws, &Message::error(ErrorCode::Handshake, "expected hello")).await?,
                Err(e) => send(&mut ws, &Message::error(ErrorCode::Protocol, e.to_string())).await?,
            },
            WsMessage::Close(_) => return Ok(()),
            _ => {}
        }
    };

    match role {
        Role::Observer => observe(ws, &shared).await,
        Role::Operator => {
            if shared
                .operator_present
                .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
                .is_err()
            {
                send(&mut ws, &Message::error(ErrorCode::SlotTaken, "operator slot taken")).await?;
                ws.close(None).await?;
                return Ok(());
            }
            let result = operate(&mut ws, &shared).await;
            *shared.operator_tx.lock().expect("operator slot lock") = None;
            shared.operator_present.store(false, Ordering::SeqCst);
            result
        }
    }
}

async fn observe(mut ws: Ws, shared: &Shared) -> Result<(), tokio_tungstenite::tungstenite::Error> {
    let mut rx = shared.observers.subscribe();
    loop {
        tokio::select! {
            snap = rx.recv() => match snap {
                Ok(s) => send(&mut ws, &Message::Snapshot(s)).await?,
                // slow observer: the oldest snapshots were dropped
                Err(broadcast::error::RecvError::Lagged(_)) => {}
                Err(broadcast::error::RecvError::Closed) => return Ok(()),
            },
            msg = ws.next() => match msg {
                None => return Ok(()),
                Some(msg) => match msg? {
                    WsMessage::Text(text) => {
                        let reply = match decode(text.as_str()) {
                            Ok(_) => Message::error(ErrorCode::ReadOnly, "observers cannot send messages"),
                            Err(e) => Message::error(ErrorCode::Protocol, e.to_string()),
                        };
                        send(&mut ws, &reply).await?;
                    }
                    WsMessage::Close(_) => return Ok(()),
                    _ => {}
                },
            },
        }
    }
}

async fn operate(ws: &mut Ws, shared: &Shared) -> Result<(), tokio_tungstenite::tungstenite::Error> {
    let (tx, mut rx) = mpsc::channel(64);
    *shared.operator_tx.lock().expect("operator slot lock") = Some(tx);
    loop {
        tokio::select! {
            snap = rx.recv() => match snap {
                Some(s) => send(ws, &Message::Snapshot(s)).await?,
                None => return Ok(()),
            },
            msg = ws.next() => match msg {
                None => return Ok(()),
                Some(msg) => match msg? {
                    WsMessage::Text(text) => {
                        if let Some(reply) = route_command(text.as_str(), shared) {
                            send(ws, &reply).await?;
                        }
                    }
                    WsMessage::Close(_) => return Ok(()),
                    _ => {}
                },
            },
        }
    }
}

/// Validate an operator frame and queue its command. Returns the error frame
/// to send back, if any.
fn route_command(frame: &str, shared: &Shared) -> Option<Message> {
    let cmd = match decode(frame) {
        Ok(Message::Command(cmd)) => cmd,
        Ok(Message::Hello { .. }) => return Some(Message::error(ErrorCode::Handshake, "already greeted")),
        Ok(_) => return Some(Message::error(ErrorCode::Protocol, "operators may only send commands")),
        Err(e) => return Some(Message::error(ErrorCode::Protocol, e.to_string())),
    };
    if !cmd.axial_position_mm.is_finite() || !cmd.t.is_finite() {
        return Some(Message::error(ErrorCode::InvalidCommand, "position and time must be finite"));
    }
    match shared.commands.try_send(cmd) {
        Ok(()) => None,
        Err(TrySendError::Full(_)) => Some(Message::error(ErrorCode::QueueFull, "command queue full")),
        Err(TrySendError::Disconnected(_)) => Some(Message::error(ErrorCode::InvalidCommand, "session finished")),
    }
}
