use crate::protocol::{
    decode_inbound, encode_outbound, error_frame, ControlAction, ErrorCode, Inbound, InputMessage, Outbound, Role,
    Welcome,
};
use crate::{ServiceConfig, TeleopError, TeleopSession};
use futures_util::{SinkExt, StreamExt};
use locoman_core::WorldState;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, mpsc, watch};
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tokio_tungstenite::tungstenite::http::StatusCode;
use tokio_tungstenite::tungstenite::Message;

type Reply = mpsc::UnboundedSender<String>;

enum Event {
    Control { seq: Option<u64>, action: ControlAction, reply: Reply },
    Lockstep { msg: Inbound, reply: Reply },
}

struct Shared {
    lockstep: bool,
    dt: f64,
    hold_ms: f64,
    controller: AtomicBool,
    tick: AtomicU64,
    mailbox: Mutex<Option<InputMessage>>,
    world: Mutex<WorldState>,
    events: mpsc::UnboundedSender<Event>,
    states: broadcast::Sender<Arc<str>>,
}

pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: watch::Sender<bool>,
    accept: JoinHandle<()>,
    sim: JoinHandle<()>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Copy of the world after the latest tick.
    pub fn world(&self) -> WorldState {
        self.shared.world.lock().expect("world lock").clone()
    }

    /// Runs until the listener stops.
    pub async fn wait(self) -> Result<(), TeleopError> {
        let _ = self.accept.await;
        let _ = self.shutdown.send(true);
        let _ = self.sim.await;
        Ok(())
    }

    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        let _ = self.accept.await;
        let _ = self.sim.await;
    }
}

/// Binds `addr` and starts the simulation loop and the listener.
pub async fn serve(config: ServiceConfig, addr: &str) -> Result<ServerHandle, TeleopError> {
    let lockstep = config.lockstep;
    let period = Duration::from_secs_f64(1.0 / config.rate_hz);
    let hold_ms = config.hold_seconds * 1e3;
    let session = TeleopSession::new(config)?;
    let listener = TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;
    let (events, events_rx) = mpsc::unbounded_channel();
    let (states, _) = broadcast::channel(64);
    let shared = Arc::new(Shared {
        lockstep,
        dt: session.dt(),
        hold_ms,
        controller: AtomicBool::new(false),
        tick: AtomicU64::new(0),
        mailbox: Mutex::new(None),
        world: Mutex::new(session.world().clone()),
        events,
        states,
    });
    let (shutdown, shutdown_rx) = watch::channel(false);
    let sim = tokio::spawn(sim_loop(session, shared.clone(), events_rx, period, shutdown_rx.clone()));
    let accept = tokio::spawn(accept_loop(listener, shared.clone(), shutdown_rx));
    Ok(ServerHandle {
        addr,
        shared,
        shutdown,
        accept,
        sim,
    })
}

fn publish(shared: &Shared, session: &TeleopSession, result: Result<crate::protocol::StateSnapshot, TeleopError>) {
    shared.tick.store(session.tick(), Ordering::SeqCst);
    session.world().clone_into(&mut shared.world.lock().expect("world lock"));
    match result {
        Ok(s) => {
            let _ = shared.states.send(encode_outbound(&Outbound::State(s)).into());
        }
        Err(e) => eprintln!("teleop: tick {} failed: {e}", session.tick()),
    }
}

async fn sim_loop(
    mut session: TeleopSession,
    shared: Arc<Shared>,
    mut events: mpsc::UnboundedReceiver<Event>,
    period: Duration,
    mut shutdown: watch::Receiver<bool>,
) {
    if shared.lockstep {
        loop {
            let event = tokio::select! {
                e = events.recv() => e,
                _ = shutdown.changed() => None,
            };
            let Some(event) = event else { break };
            let (msg, reply) = match event {
                Event::Lockstep { msg, reply } => (msg, reply),
                Event::Control { seq, action, reply } => (Inbound::Control { seq, action }, reply),
            };
            match session.handle(&msg) {
                Ok(Some(s)) => publish(&shared, &session, Ok(s)),
                Ok(None) => {}
                Err(e) => {
                    let _ = reply.send(error_frame(e.code(), e.to_string(), msg.seq()));
                }
            }
        }
        return;
    }
    let mut interval = tokio::time::interval(period);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            _ = interval.tick() => {}
            _ = shutdown.changed() => break,
        }
        while let Ok(event) = events.try_recv() {
            if let Event::Control { seq, action, reply } = event {
                session.acknowledge(seq);
                if let Err(e) = session.control(&action) {
                    let _ = reply.send(error_frame(e.code(), e.to_string(), seq));
                }
            }
        }
        let input = shared.mailbox.lock().expect("mailbox lock").take();
        if let Some(input) = input {
            // Validated by the reader.
            let _ = session.receive_input(&input);
        }
        let result = session.step();
        publish(&shared, &session, result);
    }
}

async fn accept_loop(listener: TcpListener, shared: Arc<Shared>, mut shutdown: watch::Receiver<bool>) {
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, _)) => {
                    tokio::spawn(connection(stream, shared.clone(), shutdown.clone()));
                }
                Err(e) => eprintln!("teleop: accept failed: {e}"),
            },
            _ = shutdown.changed() => break,
        }
    }
}

fn requested_role(req: &Request) -> Role {
    let viewer = req
        .uri()
        .query()
        .is_some_and(|q| q.split('&').any(|kv| kv == "role=viewer"));
    if viewer {
        Role::Viewer
    } else {
        Role::Controller
    }
}

async fn connection(stream: TcpStream, shared: Arc<Shared>, mut shutdown: watch::Receiver<bool>) {
    let mut role = Role::Controller;
    let callback = |req: &Request, resp: Response| -> Result<Response, ErrorResponse> {
        if req.uri().path() != "/teleop" {
            let mut r = ErrorResponse::new(Some("not found".into()));
            *r.status_mut() = StatusCode::NOT_FOUND;
            return Err(r);
        }
        role = requested_role(req);
        Ok(resp)
    };
    let Ok(ws) = tokio_tungstenite::accept_hdr_async(stream, callback).await else {
        return;
    };
    let (mut sink, mut source) = ws.split();
    if role == Role::Controller && shared.controller.swap(true, Ordering::SeqCst) {
        let _ = sink
            .send(Message::Text(error_frame(ErrorCode::ControllerTaken, "a controller is already connected", None)))
            .await;
        let _ = sink.close().await;
        return;
    }
    let (reply, mut replies) = mpsc::unbounded_channel::<String>();
    let welcome = Outbound::Welcome(Welcome {
        role,
        tick: shared.tick.load(Ordering::SeqCst),
        dt: shared.dt,
        hold_ms: shared.hold_ms,
        lockstep: shared.lockstep,
    });
    let _ = reply.send(encode_outbound(&welcome));
    let mut states = shared.states.subscribe();
    let writer = tokio::spawn(async move {
        loop {
            let text: String = tokio::select! {
                biased;
                r = replies.recv() => match r {
                    Some(t) => t,
                    None => break,
                },
                s = states.recv() => match s {
                    Ok(t) => t.to_string(),
                    Err(broadcast::error::RecvError::Lagged(_)) => continue,
                    Err(broadcast::error::RecvError::Closed) => break,
                },
            };
            if sink.send(Message::Text(text)).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });
    loop {
        let frame = tokio::select! {
            f = source.next() => f,
            _ = shutdown.changed() => None,
        };
        let Some(Ok(frame)) = frame else { break };
        let text = match frame {
            Message::Text(t) => t,
            Message::Close(_) => break,
            Message::Binary(_) => {
                let _ = reply.send(error_frame(ErrorCode::Malformed, "binary frames are not supported", None));
                continue;
            }
            _ => continue,
        };
        let msg = match decode_inbound(&text) {
            Ok(m) => m,
            Err(e) => {
                let _ = reply.send(encode_outbound(&Outbound::Error(e)));
                continue;
            }
        };
        if role == Role::Viewer {
            let _ = reply.send(error_frame(ErrorCode::NotController, "viewers cannot send commands", msg.seq()));
            continue;
        }
        if let Inbound::Input(input) = &msg {
            if let Err(e) = input.wrist_right.to_pose().and(input.wrist_left.to_pose()) {
                let _ = reply.send(error_frame(ErrorCode::Invalid, e, input.seq));
                continue;
            }
        }
        let event = match msg {
            _ if shared.lockstep => Event::Lockstep {
                msg,
                reply: reply.clone(),
            },
            Inbound::Input(input) => {
                *shared.mailbox.lock().expect("mailbox lock") = Some(input);
                continue;
            }
            Inbound::Control { seq, action } => Event::Control {
                seq,
                action,
                reply: reply.clone(),
            },
            Inbound::Step { seq } => {
                let _ = reply.send(error_frame(ErrorCode::Invalid, "step is only accepted in lockstep mode", seq));
                continue;
            }
        };
        let _ = shared.events.send(event);
    }
    if role == Role::Controller {
        shared.controller.store(false, Ordering::SeqCst);
    }
    drop(reply);
    writer.abort();
}
