mod common;

use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::time::Duration;

use hybridsd::sampler::SamplerKind;
use hybridsd::Codec;
use hybridsd_edgecloud::frame::{read_frame, Frame, MessageType, HEADER_LEN, MAX_PAYLOAD, PROTOCOL_VERSION};
use hybridsd_edgecloud::{edge_run, EdgeConfig, Request};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{models, request, schedule, start_server};

fn random_frame(rng: &mut ChaCha8Rng) -> Frame {
    let kind = MessageType::ALL[rng.gen_range(0..6)];
    let len = if rng.gen_bool(0.01) { rng.gen_range(0..200_000) } else { rng.gen_range(0..300) };
    let payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
    Frame {
        version: rng.gen(),
        kind,
        payload,
    }
}

#[test]
fn frames_round_trip_under_fuzz() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut stream = Vec::new();
    let mut sent = Vec::new();
    for _ in 0..10_000 {
        let f = random_frame(&mut rng);
        let bytes = f.encode();
        assert_eq!(bytes.len(), HEADER_LEN + f.payload.len());
        assert_eq!(Frame::decode(&bytes).unwrap(), f);
        stream.extend_from_slice(&bytes);
        sent.push(f);
    }
    let mut cursor = std::io::Cursor::new(stream);
    for f in &sent {
        assert_eq!(read_frame(&mut cursor, MAX_PAYLOAD).unwrap().as_ref(), Some(f));
    }
    assert!(read_frame(&mut cursor, MAX_PAYLOAD).unwrap().is_none());
}

#[test]
fn corrupted_frames_are_rejected_without_panicking() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let f = random_frame(&mut rng);
        let mut bytes = f.encode();
        match rng.gen_range(0..4) {
            0 => {
                let cut = rng.gen_range(0..bytes.len());
                bytes.truncate(cut);
                assert!(Frame::decode(&bytes).is_err());
            }
            1 => {
                bytes.push(rng.gen());
                assert!(Frame::decode(&bytes).is_err());
            }
            2 => {
                let i = rng.gen_range(0..4);
                bytes[i] ^= rng.gen_range(1..=255);
                assert!(Frame::decode(&bytes).is_err());
            }
            _ => {
                let i = rng.gen_range(0..bytes.len());
                bytes[i] = rng.gen();
                let _ = Frame::decode(&bytes);
                let _ = read_frame(&mut std::io::Cursor::new(&bytes), 4096);
            }
        }
    }
    let mut unknown = Frame::new(MessageType::Done, vec![]).encode();
    unknown[6] = 42;
    assert!(Frame::decode(&unknown).is_err());
}

/// Sends raw bytes, closes the write half, collects whatever frames come back.
fn raw(addr: SocketAddr, bytes: &[u8]) -> Vec<Frame> {
    let mut s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    s.write_all(bytes).unwrap();
    let _ = s.shutdown(Shutdown::Write);
    let mut back = Vec::new();
    let _ = s.read_to_end(&mut back);
    let mut cursor = std::io::Cursor::new(back);
    let mut frames = Vec::new();
    while let Ok(Some(f)) = read_frame(&mut cursor, MAX_PAYLOAD) {
        frames.push(f);
    }
    frames
}

fn kinds(frames: &[Frame]) -> Vec<MessageType> {
    frames.iter().map(|f| f.kind).collect()
}

fn hello() -> Vec<u8> {
    Frame::new(MessageType::Hello, vec![]).encode()
}

fn with_hello(frame: Frame) -> Vec<u8> {
    let mut b = hello();
    b.extend(frame.encode());
    b
}

#[test]
fn malformed_sessions_get_an_error_and_the_server_survives() {
    use MessageType::*;
    let (large, small) = models();
    let server = start_server(large);
    let addr = server.addr;
    let good = Request::Generate(request(3, 10, SamplerKind::Dpm2m));

    assert_eq!(kinds(&raw(addr, b"not a frame at all")), [Error]);
    let mut old = Frame::new(Hello, vec![]);
    old.version = PROTOCOL_VERSION + 1;
    let reply = raw(addr, &old.encode());
    assert_eq!(kinds(&reply), [Error]);
    assert!(reply[0].text().contains("version"));
    assert_eq!(kinds(&raw(addr, &good.to_frame().unwrap().encode())), [Error]);
    assert_eq!(kinds(&raw(addr, &with_hello(Frame::new(GenerateRequest, b"{oops".to_vec())))), [Hello, Error]);
    assert_eq!(kinds(&raw(addr, &with_hello(Frame::new(Handoff, vec![1, 2, 3])))), [Hello, Error]);
    assert_eq!(kinds(&raw(addr, &with_hello(Frame::new(Done, vec![])))), [Hello, Error]);
    let mut huge = hello();
    huge.extend_from_slice(b"HSDW\x01\x00\x02");
    huge.extend_from_slice(&u32::MAX.to_le_bytes());
    assert_eq!(kinds(&raw(addr, &huge)), [Hello, Error]);
    let mut short = with_hello(good.to_frame().unwrap());
    short.truncate(short.len() - 5);
    assert_eq!(kinds(&raw(addr, &short)), [Hello, Error]);
    let mut unknown = hello();
    unknown.extend_from_slice(b"HSDW\x01\x00\x2a\x00\x00\x00\x00");
    assert_eq!(kinds(&raw(addr, &unknown)), [Hello, Error]);
    assert_eq!(kinds(&raw(addr, &[])), [Error]);
    let mut late = hello();
    let mut bumped = good.to_frame().unwrap();
    bumped.version = 7;
    late.extend(bumped.encode());
    assert_eq!(kinds(&raw(addr, &late)), [Hello, Error]);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let valid = with_hello(good.to_frame().unwrap());
    for _ in 0..200 {
        let mut bytes = valid.clone();
        for _ in 0..rng.gen_range(1..4) {
            let i = rng.gen_range(0..bytes.len());
            bytes[i] = rng.gen();
        }
        bytes.truncate(rng.gen_range(1..=bytes.len()));
        let frames = raw(addr, &bytes);
        assert!(!frames.is_empty());
    }

    let out = edge_run(addr, &good, &small, &Codec::identity(2), &schedule(), &EdgeConfig::default()).unwrap();
    assert_eq!(out.latent.nrows(), 4);
    server.shutdown().unwrap();
}

#[test]
fn concurrent_sessions_are_independent() {
    let (large, small) = models();
    let server = start_server(large);
    let addr = server.addr;
    let s = schedule();
    let codec = Codec::identity(2);
    let solo: Vec<_> = (0..6)
        .map(|seed| {
            let req = Request::Generate(request(seed, 12, SamplerKind::Dpm2m));
            edge_run(addr, &req, &small, &codec, &s, &EdgeConfig::default()).unwrap().sample
        })
        .collect();
    let together: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..6u64)
            .map(|seed| {
                let (small, codec, s) = (&small, &codec, &s);
                scope.spawn(move || {
                    let req = Request::Generate(request(seed, 12, SamplerKind::Dpm2m));
                    edge_run(addr, &req, small, codec, s, &EdgeConfig::default()).unwrap().sample
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(solo, together);
}

#[test]
fn requests_survive_json_round_trip() {
    let mut r = request(11, 7, SamplerKind::Ddim);
    r.conditions.push(hybridsd_edgecloud::Condition::Tokens(vec![vec![0.1, -2.5e-7], vec![3.0, 1e30]]));
    let req = Request::Generate(r);
    let frame = req.to_frame().unwrap();
    assert_eq!(frame.kind, MessageType::GenerateRequest);
    assert_eq!(Request::from_frame(&Frame::decode(&frame.encode()).unwrap()).unwrap(), req);
}
