//! WebSocket endpoint: one client at a time, one JSON message per text frame.

use std::io::ErrorKind;
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use tungstenite::{Message, WebSocket};

use super::protocol::{Envelope, ErrorCode, ServerMessage, PROTOCOL_VERSION};
use super::service::TeachService;

const POLL: Duration = Duration::from_millis(10);

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Serves `service` on `listener` until `stop` is set.
pub fn serve(listener: TcpListener, mut service: TeachService, stop: Arc<AtomicBool>) -> Result<TeachService, ServeError> {
    listener.set_nonblocking(true)?;
    let mut client: Option<WebSocket<TcpStream>> = None;
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, addr)) => match client {
                Some(_) => reject_busy(stream),
                None => match handshake(stream) {
                    Some(mut ws) => {
                        log::info!("client connected from {addr}");
                        let hello = service.connect();
                        if send_all(&mut ws, &hello) {
                            client = Some(ws);
                        }
                    }
                    None => log::warn!("handshake with {addr} failed"),
                },
            },
            Err(e) if e.kind() == ErrorKind::WouldBlock => {}
            Err(e) => return Err(e.into()),
        }
        let mut drop_client = false;
        if let Some(ws) = &mut client {
            match ws.read() {
                Ok(Message::Text(t)) => drop_client = !send_all(ws, &service.handle_text(t.as_str())),
                Ok(Message::Binary(_)) => {
                    let out = service.handle_text("\u{0}binary");
                    drop_client = !send_all(ws, &out);
                }
                Ok(Message::Close(_)) => drop_client = true,
                Ok(_) => {}
                Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
                Err(e) => {
                    log::info!("client dropped: {e}");
                    drop_client = true;
                }
            }
            if !drop_client {
                drop_client = !send_all(ws, &service.tick());
            }
        } else {
            // keep recordings progressing without a client
            let _ = service.tick();
            std::thread::sleep(POLL);
        }
        if drop_client {
            if let Some(mut ws) = client.take() {
                let _ = ws.close(None);
                let _ = ws.flush();
            }
        }
    }
    Ok(service)
}

fn handshake(stream: TcpStream) -> Option<WebSocket<TcpStream>> {
    stream.set_nonblocking(false).ok()?;
    stream.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    let ws = tungstenite::accept(stream).ok()?;
    ws.get_ref().set_read_timeout(Some(POLL)).ok()?;
    Some(ws)
}

fn reject_busy(stream: TcpStream) {
    if let Some(mut ws) = handshake(stream) {
        let env = Envelope { v: PROTOCOL_VERSION, seq: 1, body: ServerMessage::Error { code: ErrorCode::Busy, message: "another client is connected".into() } };
        let _ = ws.send(Message::text(env.to_json()));
        let _ = ws.close(None);
        let _ = ws.flush();
    }
}

fn send_all(ws: &mut WebSocket<TcpStream>, msgs: &[Envelope<ServerMessage>]) -> bool {
    for m in msgs {
        if ws.send(Message::text(m.to_json())).is_err() {
            return false;
        }
    }
    true
}
