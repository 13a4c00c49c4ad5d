//! Byte-stream transports. Both carry the same length-prefixed frames; the
//! in-memory one lets a test run many nodes in one process without sockets.

use std::collections::HashMap;
use std::io;
use std::sync::{Arc, Mutex};

use agora_core::ledger::PeerAddress;
use async_trait::async_trait;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;

pub trait Stream: AsyncRead + AsyncWrite + Send + Unpin + 'static {}
impl<T: AsyncRead + AsyncWrite + Send + Unpin + 'static> Stream for T {}

pub type BoxStream = Box<dyn Stream>;

#[async_trait]
pub trait Listener: Send {
    async fn accept(&mut self) -> io::Result<BoxStream>;
    fn local_addr(&self) -> PeerAddress;
}

#[async_trait]
pub trait Transport: Send + Sync {
    async fn bind(&self, addr: &PeerAddress) -> io::Result<Box<dyn Listener>>;
    async fn connect(&self, addr: &PeerAddress) -> io::Result<BoxStream>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct TcpTransport;

struct TcpAcceptor {
    listener: TcpListener,
    addr: PeerAddress,
}

#[async_trait]
impl Listener for TcpAcceptor {
    async fn accept(&mut self) -> io::Result<BoxStream> {
        let (stream, _) = self.listener.accept().await?;
        stream.set_nodelay(true)?;
        Ok(Box::new(stream))
    }

    fn local_addr(&self) -> PeerAddress {
        self.addr.clone()
    }
}

#[async_trait]
impl Transport for TcpTransport {
    async fn bind(&self, addr: &PeerAddress) -> io::Result<Box<dyn Listener>> {
        let listener = TcpListener::bind((addr.host.as_str(), addr.port)).await?;
        let port = listener.local_addr()?.port();
        Ok(Box::new(TcpAcceptor {
            listener,
            addr: PeerAddress::new(addr.host.clone(), port),
        }))
    }

    async fn connect(&self, addr: &PeerAddress) -> io::Result<BoxStream> {
        let stream = TcpStream::connect((addr.host.as_str(), addr.port)).await?;
        stream.set_nodelay(true)?;
        Ok(Box::new(stream))
    }
}

const PIPE_CAPACITY: usize = 256 * 1024;

/// An in-process network of named listeners joined by duplex pipes.
#[derive(Clone, Default)]
pub struct MemoryNetwork {
    listeners: Arc<Mutex<HashMap<PeerAddress, mpsc::UnboundedSender<BoxStream>>>>,
}

impl MemoryNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    /// Whether something is currently listening at `addr`.
    pub fn is_bound(&self, addr: &PeerAddress) -> bool {
        self.listeners
            .lock()
            .unwrap()
            .get(addr)
            .is_some_and(|tx| !tx.is_closed())
    }
}

struct MemoryAcceptor {
    addr: PeerAddress,
    incoming: mpsc::UnboundedReceiver<BoxStream>,
    network: MemoryNetwork,
}

impl Drop for MemoryAcceptor {
    fn drop(&mut self) {
        self.network.listeners.lock().unwrap().remove(&self.addr);
    }
}

#[async_trait]
impl Listener for MemoryAcceptor {
    async fn accept(&mut self) -> io::Result<BoxStream> {
        self.incoming
            .recv()
            .await
            .ok_or_else(|| io::Error::new(io::ErrorKind::BrokenPipe, "listener closed"))
    }

    fn local_addr(&self) -> PeerAddress {
        self.addr.clone()
    }
}

#[async_trait]
impl Transport for MemoryNetwork {
    async fn bind(&self, addr: &PeerAddress) -> io::Result<Box<dyn Listener>> {
        let mut map = self.listeners.lock().unwrap();
        if map.get(addr).is_some_and(|tx| !tx.is_closed()) {
            return Err(io::Error::new(io::ErrorKind::AddrInUse, format!("{addr} in use")));
        }
        let (tx, rx) = mpsc::unbounded_channel();
        map.insert(addr.clone(), tx);
        Ok(Box::new(MemoryAcceptor {
            addr: addr.clone(),
            incoming: rx,
            network: self.clone(),
        }))
    }

    async fn connect(&self, addr: &PeerAddress) -> io::Result<BoxStream> {
        let tx = self.listeners.lock().unwrap().get(addr).cloned();
        let refused = || io::Error::new(io::ErrorKind::ConnectionRefused, format!("nothing at {addr}"));
        let tx = tx.ok_or_else(refused)?;
        let (client, server) = tokio::io::duplex(PIPE_CAPACITY);
        tx.send(Box::new(server)).map_err(|_| refused())?;
        Ok(Box::new(client))
    }
}
