//! Controller side of the worker connection.

use std::io::{BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::sync::mpsc::Sender;
use std::thread::{self, JoinHandle};

use log::warn;

use crate::protocol::{read_message, write_message, Action, ActionResult, Message, WireError, WorkerHandshake, WorkerId};

/// What the reader threads report to the controller loop.
#[derive(Debug)]
pub enum LinkEvent {
    Result(WorkerId, ActionResult),
    Closed(WorkerId),
}

/// An open connection to one worker.
pub struct WorkerLink {
    handshake: WorkerHandshake,
    out: BufWriter<TcpStream>,
    reader: Option<JoinHandle<()>>,
}

impl WorkerLink {
    /// Connects, reads the handshake, and starts forwarding results to
    /// `events` tagged with the handshake's worker id.
    pub fn connect(addr: SocketAddr, events: Sender<LinkEvent>) -> Result<Self, WireError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut input = stream.try_clone()?;
        let handshake = match read_message(&mut input)? {
            Some(Message::Handshake(h)) => h,
            Some(_) => return Err(crate::protocol::DecodeError::Invalid("expected handshake").into()),
            None => return Err(std::io::Error::from(std::io::ErrorKind::UnexpectedEof).into()),
        };
        let worker = handshake.worker_id;
        let reader = thread::spawn(move || {
            loop {
                match read_message(&mut input) {
                    Ok(Some(Message::Result(r))) => {
                        if events.send(LinkEvent::Result(worker, r)).is_err() {
                            return;
                        }
                    }
                    Ok(Some(other)) => warn!("controller ignoring unexpected message {other:?}"),
                    Ok(None) => break,
                    Err(e) => {
                        warn!("worker {worker} connection error: {e}");
                        break;
                    }
                }
            }
            let _ = events.send(LinkEvent::Closed(worker));
        });
        Ok(WorkerLink {
            handshake,
            out: BufWriter::new(stream),
            reader: Some(reader),
        })
    }

    pub fn handshake(&self) -> &WorkerHandshake {
        &self.handshake
    }

    /// Buffers an action; call [`WorkerLink::flush`] to send.
    pub fn send(&mut self, action: Action) -> Result<(), WireError> {
        write_message(&mut self.out, &Message::Action(action))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), WireError> {
        self.out.flush()?;
        Ok(())
    }

    /// Stops sending; the worker finishes accepted work and disconnects.
    pub fn close(mut self) {
        let _ = self.out.flush();
        let _ = self.out.get_ref().shutdown(Shutdown::Write);
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
    }
}
