use std::io::{self, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use thiserror::Error;

use super::codec::{AbortReason, CodecError};
use super::{decode, encode, Frame, FrameError, MsgType};
use crate::vault::AaRejection;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("peer closed the session")]
    Closed,
    #[error("timed out waiting for the peer")]
    Timeout,
    #[error(transparent)]
    Frame(FrameError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("expected {expected:?}, got {got:?}")]
    Unexpected { expected: MsgType, got: MsgType },
    #[error("authority rejected the request: {0}")]
    Rejected(AaRejection),
    #[error("peer aborted the session: {0:?}")]
    Aborted(AbortReason),
    #[error(transparent)]
    Io(io::Error),
}

impl From<FrameError> for TransportError {
    fn from(e: FrameError) -> Self {
        match e {
            FrameError::Incomplete => TransportError::Closed,
            FrameError::Io(io) => io.into(),
            other => TransportError::Frame(other),
        }
    }
}

impl From<io::Error> for TransportError {
    fn from(e: io::Error) -> Self {
        use io::ErrorKind::*;
        match e.kind() {
            WouldBlock | TimedOut => TransportError::Timeout,
            UnexpectedEof | ConnectionReset | ConnectionAborted | BrokenPipe => TransportError::Closed,
            _ => TransportError::Io(e),
        }
    }
}

/// One session between two endpoints. Frames arrive in the order sent.
pub trait FrameChannel {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError>;
    fn recv(&mut self) -> Result<Frame, TransportError>;
    /// Bounds how long `recv` blocks; `None` waits indefinitely.
    fn set_recv_timeout(&mut self, timeout: Option<Duration>) -> Result<(), TransportError>;

    /// Receives a frame and checks its type.
    fn expect(&mut self, expected: MsgType) -> Result<Frame, TransportError> {
        let f = self.recv()?;
        if f.msg_type == expected {
            Ok(f)
        } else {
            Err(TransportError::Unexpected {
                expected,
                got: f.msg_type,
            })
        }
    }
}

/// In-process session. Frames cross as encoded bytes so both backends share
/// one wire format.
#[derive(Debug)]
pub struct MemoryChannel {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    timeout: Option<Duration>,
}

impl MemoryChannel {
    pub fn pair() -> (MemoryChannel, MemoryChannel) {
        let (atx, brx) = mpsc::channel();
        let (btx, arx) = mpsc::channel();
        (
            MemoryChannel {
                tx: atx,
                rx: arx,
                timeout: None,
            },
            MemoryChannel {
                tx: btx,
                rx: brx,
                timeout: None,
            },
        )
    }
}

impl FrameChannel for MemoryChannel {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        self.tx.send(encode(frame)?).map_err(|_| TransportError::Closed)
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        let bytes = match self.timeout {
            None => self.rx.recv().map_err(|_| TransportError::Closed)?,
            Some(t) => self.rx.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => TransportError::Timeout,
                RecvTimeoutError::Disconnected => TransportError::Closed,
            })?,
        };
        Ok(decode(&mut &bytes[..])?)
    }

    fn set_recv_timeout(&mut self, timeout: Option<Duration>) -> Result<(), TransportError> {
        self.timeout = timeout;
        Ok(())
    }
}

#[derive(Debug)]
pub struct TcpChannel {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl TcpChannel {
    pub fn new(stream: TcpStream) -> Result<Self, TransportError> {
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        })
    }

    pub fn connect(addr: SocketAddr, timeout: Duration) -> Result<Self, TransportError> {
        Self::new(TcpStream::connect_timeout(&addr, timeout)?)
    }
}

impl FrameChannel for TcpChannel {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        self.writer.write_all(&encode(frame)?)?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        Ok(decode(&mut self.reader)?)
    }

    fn set_recv_timeout(&mut self, timeout: Option<Duration>) -> Result<(), TransportError> {
        // A zero timeout means "block forever" to the socket API.
        let timeout = timeout.map(|t| t.max(Duration::from_millis(1)));
        self.writer.set_read_timeout(timeout)?;
        Ok(())
    }
}

/// Opens sessions to a fixed endpoint.
pub trait Connector {
    type Channel: FrameChannel + Send + 'static;
    fn connect(&self) -> Result<Self::Channel, TransportError>;
}

/// Accepts sessions on a listening endpoint.
pub trait Acceptor {
    type Channel: FrameChannel + Send + 'static;
    /// Waits at most `timeout` for the next session.
    fn accept_timeout(&mut self, timeout: Duration) -> Result<Option<Self::Channel>, TransportError>;
}

#[derive(Debug, Clone)]
pub struct MemoryConnector {
    tx: Sender<MemoryChannel>,
}

#[derive(Debug)]
pub struct MemoryAcceptor {
    rx: Receiver<MemoryChannel>,
}

/// An in-process listening endpoint and a connector for it.
pub fn memory_endpoint() -> (MemoryConnector, MemoryAcceptor) {
    let (tx, rx) = mpsc::channel();
    (MemoryConnector { tx }, MemoryAcceptor { rx })
}

impl Connector for MemoryConnector {
    type Channel = MemoryChannel;

    fn connect(&self) -> Result<MemoryChannel, TransportError> {
        let (near, far) = MemoryChannel::pair();
        self.tx.send(far).map_err(|_| TransportError::Closed)?;
        Ok(near)
    }
}

impl Acceptor for MemoryAcceptor {
    type Channel = MemoryChannel;

    fn accept_timeout(&mut self, timeout: Duration) -> Result<Option<MemoryChannel>, TransportError> {
        match self.rx.recv_timeout(timeout) {
            Ok(c) => Ok(Some(c)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::Closed),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TcpConnector {
    pub addr: SocketAddr,
    pub timeout: Duration,
}

impl TcpConnector {
    pub fn new(addr: SocketAddr) -> Self {
        Self {
            addr,
            timeout: Duration::from_secs(10),
        }
    }
}

impl Connector for TcpConnector {
    type Channel = TcpChannel;

    fn connect(&self) -> Result<TcpChannel, TransportError> {
        TcpChannel::connect(self.addr, self.timeout)
    }
}

#[derive(Debug)]
pub struct TcpAcceptor {
    listener: TcpListener,
}

impl TcpAcceptor {
    pub fn bind(addr: SocketAddr) -> Result<Self, TransportError> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        Ok(Self { listener })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, TransportError> {
        Ok(self.listener.local_addr()?)
    }
}

impl Acceptor for TcpAcceptor {
    type Channel = TcpChannel;

    fn accept_timeout(&mut self, timeout: Duration) -> Result<Option<TcpChannel>, TransportError> {
        let step = Duration::from_millis(2);
        let mut waited = Duration::ZERO;
        loop {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    return TcpChannel::new(stream).map(Some);
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if waited >= timeout {
                        return Ok(None);
                    }
                    std::thread::sleep(step);
                    waited += step;
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}
