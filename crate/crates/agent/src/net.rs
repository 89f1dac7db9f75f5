//! How agents find and reach each other: an in-process neighborhood of
//! memory links, or TCP with a static peer table.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use eaas_core::link::{connect_tcp, pair, Endpoint, LinkError, LinkParams, TcpLinkListener};
use eaas_core::SimClock;
use tokio::sync::mpsc;

pub type Inbound = mpsc::UnboundedReceiver<Endpoint>;

/// Devices in radio range of each other inside one process.
#[derive(Clone)]
pub struct Neighborhood {
    members: Arc<Mutex<HashMap<String, mpsc::UnboundedSender<Endpoint>>>>,
    params: LinkParams,
    clock: SimClock,
}

impl Neighborhood {
    pub fn new(params: LinkParams, clock: SimClock) -> Self {
        Self {
            members: Arc::default(),
            params,
            clock,
        }
    }

    /// Registers `device_id`; links opened to it arrive on the returned
    /// channel.
    pub fn join(&self, device_id: &str) -> Inbound {
        let (tx, rx) = mpsc::unbounded_channel();
        self.members.lock().unwrap().insert(device_id.to_string(), tx);
        rx
    }

    pub fn connect(&self, peer_id: &str) -> Result<Endpoint, LinkError> {
        let tx = self
            .members
            .lock()
            .unwrap()
            .get(peer_id)
            .cloned()
            .ok_or_else(|| LinkError::Io(format!("no device {peer_id} in range")))?;
        let (near, far) = pair(self.params, self.clock)?;
        tx.send(far)
            .map_err(|_| LinkError::Io(format!("device {peer_id} left")))?;
        Ok(near)
    }
}

/// Outbound half of an agent's networking.
#[derive(Clone)]
pub enum Connector {
    Memory(Neighborhood),
    Tcp {
        peers: HashMap<String, SocketAddr>,
        params: LinkParams,
        clock: SimClock,
    },
}

impl Connector {
    pub async fn connect(&self, peer_id: &str) -> Result<Endpoint, LinkError> {
        match self {
            Connector::Memory(n) => n.connect(peer_id),
            Connector::Tcp { peers, params, clock } => {
                let addr = peers
                    .get(peer_id)
                    .ok_or_else(|| LinkError::Io(format!("no address known for {peer_id}")))?;
                connect_tcp(*addr, *params, *clock).await
            }
        }
    }
}

/// Accepts TCP links forever, handing each to the returned channel.
pub fn accept_tcp(listener: TcpLinkListener) -> Inbound {
    let (tx, rx) = mpsc::unbounded_channel();
    tokio::spawn(async move {
        loop {
            match listener.accept().await {
                Ok(ep) => {
                    if tx.send(ep).is_err() {
                        break;
                    }
                }
                Err(e) => tracing::warn!("link accept failed: {e}"),
            }
        }
    });
    rx
}
