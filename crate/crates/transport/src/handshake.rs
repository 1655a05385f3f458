//! Mocked mutual attestation with pre-shared test credentials.
//!
//! Both sides exchange measurement blobs and 16-byte randoms; a match on the
//! expected peer measurement admits the session. The session's network key
//! and the pair of random start counters (one per direction) are derived
//! from the pre-shared secret and the handshake transcript, so both sides
//! compute identical values without putting key material on the wire.

use rand::RngCore;

use sealstor_core::crypto::{hmac, CipherSuite, NetworkKey};
use sealstor_core::layout::NET_COUNTER_MAX;

use crate::frame::{BodyReader, BodyWriter, Frame, FrameType, RejectCode};
use crate::link::FrameLink;
use crate::TransportError;

/// Pre-shared test credentials standing in for attestation evidence.
#[derive(Debug, Clone)]
pub struct Credentials {
    /// This side's measurement blob.
    pub measurement: Vec<u8>,
    /// Measurement expected from the peer.
    pub peer_measurement: Vec<u8>,
    /// Pre-shared secret seeding the session keys.
    pub psk: [u8; 32],
}

impl Credentials {
    /// Symmetric test credentials where both sides share one measurement.
    pub fn symmetric(measurement: &[u8], psk: [u8; 32]) -> Self {
        Self {
            measurement: measurement.to_vec(),
            peer_measurement: measurement.to_vec(),
            psk,
        }
    }
}

/// Established session: the network key and the two directional start
/// counters.
#[derive(Debug, Clone)]
pub struct SessionState {
    pub session_id: u64,
    pub net_key: NetworkKey,
    /// First network counter this side sends with.
    pub send_start: u64,
    /// First network counter this side expects to receive.
    pub recv_start: u64,
}

fn derive_session(
    suite: &CipherSuite,
    psk: &[u8; 32],
    client_rand: &[u8],
    server_rand: &[u8],
    session_id: u64,
    is_client: bool,
) -> SessionState {
    let sid = session_id.to_le_bytes();
    let net =
        hmac(suite.hash, psk, &[b"net-key", client_rand, server_rand, &sid]);
    let c2s = hmac(suite.hash, psk, &[b"c2s-start", client_rand, server_rand, &sid]);
    let s2c = hmac(suite.hash, psk, &[b"s2c-start", client_rand, server_rand, &sid]);
    let low48 = |bytes: &[u8; 32]| -> u64 {
        let mut v = [0u8; 8];
        v[..6].copy_from_slice(&bytes[..6]);
        u64::from_le_bytes(v) & NET_COUNTER_MAX
    };
    let (send_start, recv_start) = if is_client {
        (low48(&c2s), low48(&s2c))
    } else {
        (low48(&s2c), low48(&c2s))
    };
    SessionState {
        session_id,
        net_key: NetworkKey::from_bytes(net),
        send_start,
        recv_start,
    }
}

pub fn client_handshake(
    link: &dyn FrameLink,
    creds: &Credentials,
    suite: &CipherSuite,
    rng: &mut dyn RngCore,
) -> Result<SessionState, TransportError> {
    let mut client_rand = [0u8; 16];
    rng.fill_bytes(&mut client_rand);
    let mut body = BodyWriter::new();
    body.put_bytes(&creds.measurement).put_raw(&client_rand);
    link.send(Frame::new(FrameType::Hello, 0, body.finish()))?;

    let reply = link.recv()?;
    match reply.frame_type {
        FrameType::Attest => {}
        FrameType::Reject => return Err(TransportError::HandshakeRefused),
        other => return Err(TransportError::Protocol(format!("unexpected {other:?}"))),
    }
    let mut reader = BodyReader::new(&reply.body);
    let server_measurement = reader.bytes()?;
    let server_rand: [u8; 16] = reader.fixed(16)?.try_into().unwrap();
    reader.expect_end()?;
    if server_measurement != creds.peer_measurement {
        return Err(TransportError::HandshakeRefused);
    }
    Ok(derive_session(
        suite,
        &creds.psk,
        &client_rand,
        &server_rand,
        reply.session_id,
        true,
    ))
}

pub fn server_handshake(
    link: &dyn FrameLink,
    creds: &Credentials,
    suite: &CipherSuite,
    session_id: u64,
    rng: &mut dyn RngCore,
) -> Result<SessionState, TransportError> {
    let hello = link.recv()?;
    if hello.frame_type != FrameType::Hello {
        return Err(TransportError::Protocol(format!(
            "expected HELLO, got {:?}",
            hello.frame_type
        )));
    }
    let mut reader = BodyReader::new(&hello.body);
    let client_measurement = reader.bytes()?;
    let client_rand: [u8; 16] = reader.fixed(16)?.try_into().unwrap();
    reader.expect_end()?;
    if client_measurement != creds.peer_measurement {
        let mut body = BodyWriter::new();
        body.put_u64(0)
            .put_u8(RejectCode::Credential as u8)
            .put_u64(u64::MAX)
            .put_bytes(b"measurement mismatch");
        link.send(Frame::new(FrameType::Reject, 0, body.finish()))?;
        return Err(TransportError::HandshakeRefused);
    }

    let mut server_rand = [0u8; 16];
    rng.fill_bytes(&mut server_rand);
    let mut body = BodyWriter::new();
    body.put_bytes(&creds.measurement).put_raw(&server_rand);
    link.send(Frame::new(FrameType::Attest, session_id, body.finish()))?;
    Ok(derive_session(
        suite,
        &creds.psk,
        &client_rand,
        &server_rand,
        session_id,
        false,
    ))
}
