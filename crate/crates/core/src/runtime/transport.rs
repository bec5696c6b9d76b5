//! Frame delivery between protocol nodes.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::io::Write;
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use thiserror::Error;

use super::wire::read_frame;

/// Wire sender id of the server.
pub const SERVER_ID: u32 = 0;
/// Wire sender id of the key distributor.
pub const KD_ID: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
pub enum NodeId {
    Server,
    Kd,
    /// Client ids start at 1.
    Client(u32),
}

impl NodeId {
    pub fn wire_id(self) -> u32 {
        match self {
            NodeId::Server => SERVER_ID,
            NodeId::Kd => KD_ID,
            NodeId::Client(i) => i,
        }
    }

    pub fn from_wire(id: u32) -> Self {
        match id {
            SERVER_ID => NodeId::Server,
            KD_ID => NodeId::Kd,
            i => NodeId::Client(i),
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Server => f.write_str("server"),
            NodeId::Kd => f.write_str("kd"),
            NodeId::Client(i) => write!(f, "client {i}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("no endpoint for {0}")]
    UnknownNode(NodeId),
    #[error("no message pending for {0}")]
    Empty(NodeId),
    #[error("timed out waiting for a message at {0}")]
    Timeout(NodeId),
    #[error("connection to {0} closed")]
    Closed(NodeId),
    #[error("socket error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad frame on the stream: {0}")]
    Frame(String),
}

/// Moves encoded frames between nodes.
pub trait Transport: Send {
    fn send(&mut self, to: NodeId, frame: Vec<u8>) -> Result<(), TransportError>;
    fn recv(&mut self, at: NodeId) -> Result<Vec<u8>, TransportError>;
}

/// FIFO queues per node; delivery order equals send order.
#[derive(Debug, Default)]
pub struct InProcess {
    queues: HashMap<NodeId, VecDeque<Vec<u8>>>,
}

impl InProcess {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pending(&self, at: NodeId) -> usize {
        self.queues.get(&at).map_or(0, VecDeque::len)
    }
}

impl Transport for InProcess {
    fn send(&mut self, to: NodeId, frame: Vec<u8>) -> Result<(), TransportError> {
        self.queues.entry(to).or_default().push_back(frame);
        Ok(())
    }

    fn recv(&mut self, at: NodeId) -> Result<Vec<u8>, TransportError> {
        self.queues
            .get_mut(&at)
            .and_then(VecDeque::pop_front)
            .ok_or(TransportError::Empty(at))
    }
}

type Inbox = Receiver<Result<Vec<u8>, String>>;

/// One TCP connection per node. A reader thread per connection drains
/// frames into a channel, so senders never block on a slow receiver.
pub struct SocketTransport {
    outgoing: HashMap<NodeId, TcpStream>,
    inboxes: HashMap<NodeId, Inbox>,
    readers: Vec<JoinHandle<()>>,
    timeout: Option<Duration>,
}

impl fmt::Debug for SocketTransport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SocketTransport")
            .field("nodes", &self.outgoing.keys().collect::<Vec<_>>())
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl SocketTransport {
    /// Binds `address` and opens one connection per node through it.
    pub fn connect<A: ToSocketAddrs>(
        address: A,
        nodes: &[NodeId],
        frame_cap: usize,
        timeout: Option<Duration>,
    ) -> Result<Self, TransportError> {
        let listener = TcpListener::bind(address)?;
        let local = listener.local_addr()?;
        let mut outgoing = HashMap::new();
        let mut inboxes = HashMap::new();
        let mut readers = Vec::new();
        for &node in nodes {
            let sender = TcpStream::connect(local)?;
            sender.set_nodelay(true)?;
            let (mut incoming, _) = listener.accept()?;
            let (tx, rx) = mpsc::channel();
            readers.push(thread::spawn(move || loop {
                match read_frame(&mut incoming, frame_cap) {
                    Ok(Some(frame)) => {
                        if tx.send(Ok(frame)).is_err() {
                            break;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        let _ = tx.send(Err(e.to_string()));
                        break;
                    }
                }
            }));
            outgoing.insert(node, sender);
            inboxes.insert(node, rx);
        }
        Ok(Self {
            outgoing,
            inboxes,
            readers,
            timeout,
        })
    }
}

impl Transport for SocketTransport {
    fn send(&mut self, to: NodeId, frame: Vec<u8>) -> Result<(), TransportError> {
        let stream = self.outgoing.get_mut(&to).ok_or(TransportError::UnknownNode(to))?;
        stream.write_all(&frame)?;
        Ok(())
    }

    fn recv(&mut self, at: NodeId) -> Result<Vec<u8>, TransportError> {
        let inbox = self.inboxes.get(&at).ok_or(TransportError::UnknownNode(at))?;
        let item = match self.timeout {
            Some(t) => inbox.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => TransportError::Timeout(at),
                RecvTimeoutError::Disconnected => TransportError::Closed(at),
            })?,
            None => inbox.recv().map_err(|_| TransportError::Closed(at))?,
        };
        item.map_err(TransportError::Frame)
    }
}

impl Drop for SocketTransport {
    fn drop(&mut self) {
        for stream in self.outgoing.values() {
            let _ = stream.shutdown(Shutdown::Both);
        }
        for handle in self.readers.drain(..) {
            let _ = handle.join();
        }
    }
}
