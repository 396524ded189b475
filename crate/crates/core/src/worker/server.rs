//! Wall-clock worker server: one event thread drives the [`Worker`] state
//! machine against a real clock, and a reader thread feeds it actions from
//! the controller connection.

use std::io::{BufWriter, Write};
use std::net::TcpStream;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::thread;

use log::{debug, warn};

use super::Worker;
use crate::protocol::{read_message, write_message, Message, WireError};
use crate::time::{Clock, Nanos, SPIN_GUARD};

/// Serves one controller connection until it closes and all accepted work
/// has finished. Returns the worker so its log can be inspected.
pub fn serve(stream: TcpStream, mut worker: Worker, clock: Arc<dyn Clock>) -> Result<Worker, WireError> {
    stream.set_nodelay(true)?;
    let mut reader = stream.try_clone()?;
    let mut out = BufWriter::new(stream);
    write_message(&mut out, &Message::Handshake(worker.handshake()))?;
    out.flush()?;

    let (tx, rx) = mpsc::channel();
    let reader_thread = thread::spawn(move || loop {
        match read_message(&mut reader) {
            Ok(Some(Message::Action(a))) => {
                if tx.send(a).is_err() {
                    break;
                }
            }
            Ok(Some(other)) => warn!("worker ignoring unexpected message {other:?}"),
            Ok(None) => break,
            Err(e) => {
                warn!("worker connection error: {e}");
                break;
            }
        }
    });

    let mut open = true;
    loop {
        let next = worker.next_event_time();
        if !open && next.is_none() {
            break;
        }
        let received = match next {
            None => rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
            Some(t) => {
                let wait = t - clock.now() - SPIN_GUARD;
                if open && wait > Nanos::ZERO {
                    rx.recv_timeout(wait.to_std())
                } else {
                    match rx.try_recv() {
                        Ok(a) => Ok(a),
                        Err(mpsc::TryRecvError::Empty) => Err(RecvTimeoutError::Timeout),
                        Err(mpsc::TryRecvError::Disconnected) => Err(RecvTimeoutError::Disconnected),
                    }
                }
            }
        };
        let mut results = Vec::new();
        match received {
            Ok(action) => {
                if let Some(r) = worker.on_action(action, clock.now()) {
                    results.push(r);
                }
                while let Ok(a) = rx.try_recv() {
                    if let Some(r) = worker.on_action(a, clock.now()) {
                        results.push(r);
                    }
                }
            }
            Err(RecvTimeoutError::Timeout) => {
                if let Some(t) = next {
                    clock.wait_until(t);
                }
            }
            Err(RecvTimeoutError::Disconnected) => {
                if open {
                    debug!("controller closed connection");
                }
                open = false;
                if let Some(t) = next {
                    clock.wait_until(t);
                }
            }
        }
        results.extend(worker.advance(clock.now()));
        if !results.is_empty() && open {
            for r in results {
                write_message(&mut out, &Message::Result(r))?;
            }
            out.flush()?;
        }
    }
    let _ = reader_thread.join();
    Ok(worker)
}
