use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use teller_core::protocol::{
    decode, encode, ClientKind, CustomerId, MessageEnvelope, MessagePayload, SequenceCounter,
    SessionId, StationId,
};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use crate::error::ClientError;

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// One protocol link to the service.
///
/// Outgoing envelopes carry the session id of the latest server envelope,
/// so the link follows the server when it opens or resumes a session.
pub struct Connection {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
    session: SessionId,
    seq: SequenceCounter,
}

impl Connection {
    /// Connects to a `ws://.../ws` url without saying hello.
    pub async fn connect(url: &str) -> Result<Self, ClientError> {
        let (ws, _) = tokio_tungstenite::connect_async(url).await?;
        Ok(Self {
            ws,
            session: SessionId::NIL,
            seq: SequenceCounter::default(),
        })
    }

    /// Connects and says hello as `kind`; returns the server's answer.
    pub async fn hello(
        url: &str,
        kind: ClientKind,
        client_id: &str,
        locale: &str,
    ) -> Result<(Self, MessageEnvelope), ClientError> {
        let mut conn = Self::connect(url).await?;
        conn.send(MessagePayload::ClientHello {
            client_kind: kind,
            client_id: client_id.to_owned(),
            locale: locale.to_owned(),
        })
        .await?;
        let answer = conn.recv_timeout(Duration::from_secs(5)).await?;
        Ok((conn, answer))
    }

    pub async fn avatar(
        url: &str,
        customer: CustomerId,
        locale: &str,
    ) -> Result<(Self, MessageEnvelope), ClientError> {
        Self::hello(url, ClientKind::Avatar, &customer.0.to_string(), locale).await
    }

    pub async fn agent(
        url: &str,
        station: StationId,
    ) -> Result<(Self, MessageEnvelope), ClientError> {
        Self::hello(url, ClientKind::Agent, &station.0.to_string(), "en").await
    }

    pub fn session(&self) -> SessionId {
        self.session
    }

    /// Sends `payload`; returns the seq it went out with.
    pub async fn send(&mut self, payload: MessagePayload) -> Result<u64, ClientError> {
        let seq = self.seq.next_seq();
        let envelope = MessageEnvelope::new(self.session, seq, now_ms(), payload);
        self.send_envelope(&envelope).await?;
        Ok(seq)
    }

    /// Sends an envelope as is, numbering included.
    pub async fn send_envelope(&mut self, envelope: &MessageEnvelope) -> Result<(), ClientError> {
        let bytes = encode(envelope)?;
        let text = String::from_utf8(bytes).expect("canonical JSON is UTF-8");
        self.send_raw(text).await
    }

    pub async fn send_raw(&mut self, text: impl Into<String>) -> Result<(), ClientError> {
        self.ws.send(Message::text(text.into())).await?;
        Ok(())
    }

    /// Next envelope from the server.
    pub async fn recv(&mut self) -> Result<MessageEnvelope, ClientError> {
        loop {
            match self.ws.next().await {
                Some(Ok(Message::Text(text))) => {
                    let envelope = decode(text.as_bytes())?;
                    self.session = envelope.session_id;
                    return Ok(envelope);
                }
                Some(Ok(Message::Close(_))) | None => return Err(ClientError::Closed),
                Some(Ok(_)) => {}
                Some(Err(e)) => return Err(e.into()),
            }
        }
    }

    pub async fn recv_timeout(&mut self, wait: Duration) -> Result<MessageEnvelope, ClientError> {
        tokio::time::timeout(wait, self.recv())
            .await
            .map_err(|_| ClientError::Timeout("server message".into()))?
    }

    /// Receives until `pred` matches, returning the match and what came before it.
    pub async fn recv_until(
        &mut self,
        wait: Duration,
        mut pred: impl FnMut(&MessagePayload) -> bool,
    ) -> Result<(MessageEnvelope, Vec<MessageEnvelope>), ClientError> {
        let deadline = tokio::time::Instant::now() + wait;
        let mut skipped = Vec::new();
        loop {
            let left = deadline.saturating_duration_since(tokio::time::Instant::now());
            let envelope = tokio::time::timeout(left, self.recv())
                .await
                .map_err(|_| ClientError::Timeout("matching server message".into()))??;
            if pred(&envelope.payload) {
                return Ok((envelope, skipped));
            }
            skipped.push(envelope);
        }
    }

    pub async fn close(mut self) -> Result<(), ClientError> {
        self.ws.close(None).await?;
        Ok(())
    }
}
