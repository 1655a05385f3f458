//! Framed wire protocol connecting engines and the key broker, with a
//! mocked mutual-attestation handshake. The in-process channel backend and
//! the TCP backend share one framing; `docs/protocol.md` documents it.

pub mod frame;
pub mod handshake;
pub mod link;
pub mod rpc;

use thiserror::Error;

pub use frame::{
    decode_frame, encode_frame, BodyReader, BodyWriter, Frame, FrameError, FrameType, RejectCode,
};
pub use handshake::{client_handshake, server_handshake, Credentials, SessionState};
pub use link::{channel_pair, ChannelLink, FrameLink, TcpLink};
pub use rpc::{serve_link, FrameHandler, RpcClient};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("frame error: {0}")]
    Frame(#[from] FrameError),
    #[error("connection closed")]
    Closed,
    #[error("handshake refused")]
    HandshakeRefused,
    #[error("protocol violation: {0}")]
    Protocol(String),
}

use std::sync::Arc;

use rand::RngCore;
use sealstor_core::crypto::CipherSuite;

/// Wire an in-process client/server pair: the server side handshakes and
/// serves `handler` on `workers` threads, the client side returns an
/// [`RpcClient`]. Used by tests, benches, and the loopback deployment.
pub fn connect_in_proc(
    client_creds: &Credentials,
    server_creds: &Credentials,
    suite: &CipherSuite,
    session_id: u64,
    handler: Arc<dyn FrameHandler>,
    workers: usize,
    client_rng: &mut dyn RngCore,
    server_rng: &mut (dyn RngCore + Send),
) -> Result<RpcClient, TransportError> {
    let (client_link, server_link) = channel_pair();
    let server_link: Arc<dyn FrameLink> = Arc::new(server_link);
    let server_creds = server_creds.clone();
    let suite_copy = *suite;
    let server_session = {
        // Handshake runs inline on both links; the server side first posts
        // its half on a scratch thread to avoid deadlock on the channel
        // rendezvous.
        let server_link = Arc::clone(&server_link);
        let mut rng = rand_seed_from(server_rng);
        std::thread::spawn(move || {
            server_handshake(server_link.as_ref(), &server_creds, &suite_copy, session_id, &mut rng)
        })
    };
    let client_link: Arc<dyn FrameLink> = Arc::new(client_link);
    let client_session = client_handshake(client_link.as_ref(), client_creds, suite, client_rng)?;
    let server_session = server_session
        .join()
        .map_err(|_| TransportError::Closed)??;
    serve_link(server_link, server_session, handler, workers);
    Ok(RpcClient::new(client_link, client_session))
}

fn rand_seed_from(rng: &mut dyn RngCore) -> rand::rngs::StdRng {
    use rand::SeedableRng;
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    rand::rngs::StdRng::from_seed(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn creds() -> Credentials {
        Credentials::symmetric(b"test-measurement", [0x11; 32])
    }

    #[test]
    fn matching_credentials_establish_shared_session() {
        let suite = CipherSuite::default();
        let (a, b) = channel_pair();
        let server_creds = creds();
        let server = std::thread::spawn(move || {
            let mut rng = rand::rngs::StdRng::seed_from_u64(2);
            server_handshake(&b, &server_creds, &CipherSuite::default(), 7, &mut rng)
        });
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let client = client_handshake(&a, &creds(), &suite, &mut rng).unwrap();
        let server = server.join().unwrap().unwrap();
        assert_eq!(client.session_id, 7);
        assert_eq!(client.net_key, server.net_key);
        assert_eq!(client.send_start, server.recv_start);
        assert_eq!(client.recv_start, server.send_start);
    }

    #[test]
    fn mismatched_credentials_are_refused() {
        let suite = CipherSuite::default();
        let (a, b) = channel_pair();
        let server_creds = creds();
        let server = std::thread::spawn(move || {
            let mut rng = rand::rngs::StdRng::seed_from_u64(2);
            server_handshake(&b, &server_creds, &CipherSuite::default(), 7, &mut rng)
        });
        let bad = Credentials::symmetric(b"wrong", [0x11; 32]);
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let err = client_handshake(&a, &bad, &suite, &mut rng).unwrap_err();
        assert!(matches!(err, TransportError::HandshakeRefused));
        assert!(server.join().unwrap().is_err());
    }

    #[test]
    fn sessions_get_independent_counters() {
        let suite = CipherSuite::default();
        let mut sessions = Vec::new();
        for i in 0..4u64 {
            let (a, b) = channel_pair();
            let server_creds = creds();
            let server = std::thread::spawn(move || {
                let mut rng = rand::rngs::StdRng::seed_from_u64(100 + i);
                server_handshake(&b, &server_creds, &CipherSuite::default(), i, &mut rng)
            });
            let mut rng = rand::rngs::StdRng::seed_from_u64(i);
            sessions.push(client_handshake(&a, &creds(), &suite, &mut rng).unwrap());
            server.join().unwrap().unwrap();
        }
        let starts: std::collections::HashSet<u64> =
            sessions.iter().map(|s| s.send_start).collect();
        assert_eq!(starts.len(), sessions.len(), "start counters collide");
        let keys: std::collections::HashSet<[u8; 32]> =
            sessions.iter().map(|s| *s.net_key.as_bytes()).collect();
        assert_eq!(keys.len(), sessions.len());
    }
}
