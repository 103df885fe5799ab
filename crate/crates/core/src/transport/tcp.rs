//! Full-mesh TCP transport.
//!
//! Every rank binds the port listed for it in the roster. Rank `i` dials every
//! rank `j < i` and accepts a connection from every rank `j > i`, so each pair
//! shares exactly one stream. Both ends open with an 8-byte hello: the frame
//! magic, the version, `0xFF` and the sender's rank as a little-endian `u32`.
//!
//! Each peer stream gets a reader thread that decodes frames into a shared
//! inbox and a writer thread fed by a channel, so `send` never blocks on the
//! network. On shutdown the writer sends a goodbye frame and closes its
//! half of the stream. A peer whose stream ends without a goodbye is reported
//! as [`TransportError::TransportClosed`].

use std::collections::VecDeque;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::frame::{read_frame, MAGIC, VERSION};
use super::{check_rank, Control, Frame, RankRoster, Transport, TransportError};

const HELLO_MARK: u8 = 0xFF;
const DIAL_RETRY: Duration = Duration::from_millis(20);

#[derive(Debug, Default)]
struct Inbox {
    frames: VecDeque<Frame>,
    broken: Vec<usize>,
    departed: Vec<usize>,
}

#[derive(Debug, Default)]
struct Shared {
    inbox: Mutex<Inbox>,
    wake: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Inbox> {
        self.inbox.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn push(&self, frame: Frame) {
        self.lock().frames.push_back(frame);
        self.wake.notify_all();
    }

    fn mark(&self, peer: usize, graceful: bool) {
        let mut inbox = self.lock();
        let list = if graceful {
            &mut inbox.departed
        } else {
            &mut inbox.broken
        };
        if !list.contains(&peer) {
            list.push(peer);
        }
        drop(inbox);
        self.wake.notify_all();
    }
}

#[derive(Debug, Default)]
struct Writers {
    channels: Vec<Option<Sender<Vec<u8>>>>,
    threads: Vec<JoinHandle<()>>,
}

/// One rank's endpoint on a TCP mesh.
#[derive(Debug)]
pub struct TcpTransport {
    rank: usize,
    world_size: usize,
    shared: Arc<Shared>,
    writers: Mutex<Writers>,
    streams: Vec<TcpStream>,
}

fn io_err(e: std::io::Error) -> TransportError {
    TransportError::Io(e.to_string())
}

fn hello(rank: usize) -> [u8; 8] {
    let r = (rank as u32).to_le_bytes();
    [MAGIC[0], MAGIC[1], VERSION, HELLO_MARK, r[0], r[1], r[2], r[3]]
}

fn read_hello(stream: &mut TcpStream, deadline: Instant) -> Result<usize, TransportError> {
    let left = deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1));
    stream.set_read_timeout(Some(left)).map_err(io_err)?;
    let mut buf = [0u8; 8];
    stream.read_exact(&mut buf).map_err(io_err)?;
    stream.set_read_timeout(None).map_err(io_err)?;
    if buf[0..2] != MAGIC || buf[2] != VERSION || buf[3] != HELLO_MARK {
        return Err(TransportError::MalformedFrame(format!("bad hello {buf:02x?}")));
    }
    Ok(u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize)
}

fn dial(address: &str, deadline: Instant) -> Result<TcpStream, TransportError> {
    loop {
        let attempt = address
            .to_socket_addrs()
            .map_err(io_err)
            .and_then(|mut addrs| {
                addrs
                    .next()
                    .ok_or_else(|| TransportError::Io(format!("{address} does not resolve")))
            })
            .and_then(|sa| {
                let left = deadline.saturating_duration_since(Instant::now());
                TcpStream::connect_timeout(&sa, left.max(Duration::from_millis(1))).map_err(io_err)
            });
        match attempt {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => return Err(e),
            Err(_) => thread::sleep(DIAL_RETRY),
        }
    }
}

impl TcpTransport {
    /// Joins the mesh described by `roster` as `rank`, waiting up to
    /// `timeout` for every peer.
    pub fn connect(roster: &RankRoster, rank: usize, timeout: Duration) -> Result<Self, TransportError> {
        let world_size = roster.world_size();
        check_rank(rank, world_size)?;
        let deadline = Instant::now() + timeout;
        let me = roster.entry(rank)?;
        let listener = if rank + 1 < world_size {
            Some(
                TcpListener::bind(me.address())
                    .map_err(|e| TransportError::BindFailure(format!("{}: {e}", me.address())))?,
            )
        } else {
            None
        };

        let mut streams: Vec<Option<TcpStream>> = (0..world_size).map(|_| None).collect();
        for peer in 0..rank {
            let mut s = dial(&roster.entry(peer)?.address(), deadline)?;
            s.write_all(&hello(rank)).map_err(io_err)?;
            let got = read_hello(&mut s, deadline)?;
            if got != peer {
                return Err(TransportError::MalformedFrame(format!(
                    "dialled rank {peer} but it introduced itself as {got}"
                )));
            }
            streams[peer] = Some(s);
        }
        if let Some(listener) = &listener {
            listener.set_nonblocking(true).map_err(io_err)?;
            let mut missing = world_size - rank - 1;
            while missing > 0 {
                match listener.accept() {
                    Ok((mut s, _)) => {
                        s.set_nonblocking(false).map_err(io_err)?;
                        let peer = read_hello(&mut s, deadline)?;
                        if peer <= rank || peer >= world_size || streams[peer].is_some() {
                            return Err(TransportError::MalformedFrame(format!(
                                "unexpected hello from rank {peer}"
                            )));
                        }
                        s.write_all(&hello(rank)).map_err(io_err)?;
                        streams[peer] = Some(s);
                        missing -= 1;
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        if Instant::now() >= deadline {
                            return Err(TransportError::Io(format!(
                                "rank {rank}: {missing} peers never connected"
                            )));
                        }
                        thread::sleep(Duration::from_millis(2));
                    }
                    Err(e) => return Err(io_err(e)),
                }
            }
        }

        let shared = Arc::new(Shared::default());
        let mut handles = Vec::new();
        let mut writers = Writers {
            channels: (0..world_size).map(|_| None).collect(),
            threads: Vec::new(),
        };
        for (peer, stream) in streams.into_iter().enumerate() {
            let Some(stream) = stream else { continue };
            stream.set_nodelay(true).map_err(io_err)?;
            let read_half = stream.try_clone().map_err(io_err)?;
            handles.push(stream.try_clone().map_err(io_err)?);
            let sh = shared.clone();
            thread::Builder::new()
                .name(format!("edat-tcp-read-{rank}-{peer}"))
                .spawn(move || reader_loop(read_half, peer, sh))
                .map_err(io_err)?;
            let (tx, rx) = mpsc::channel::<Vec<u8>>();
            let sh = shared.clone();
            let goodbye = Frame::Control {
                source: rank,
                message: Control::Goodbye,
            }
            .encode()?;
            let handle = thread::Builder::new()
                .name(format!("edat-tcp-write-{rank}-{peer}"))
                .spawn(move || {
                    let mut out = BufWriter::new(&stream);
                    let mut ok = true;
                    while let Ok(first) = rx.recv() {
                        if !ok {
                            continue;
                        }
                        ok = out.write_all(&first).is_ok();
                        while let (true, Ok(more)) = (ok, rx.try_recv()) {
                            ok = out.write_all(&more).is_ok();
                        }
                        ok = ok && out.flush().is_ok();
                        if !ok {
                            sh.mark(peer, false);
                        }
                    }
                    if ok {
                        let _ = out.write_all(&goodbye).and_then(|_| out.flush());
                    }
                    drop(out);
                    let _ = stream.shutdown(Shutdown::Write);
                })
                .map_err(io_err)?;
            writers.channels[peer] = Some(tx);
            writers.threads.push(handle);
        }
        Ok(TcpTransport {
            rank,
            world_size,
            shared,
            writers: Mutex::new(writers),
            streams: handles,
        })
    }

    /// Peers that left with a goodbye.
    pub fn departed_peers(&self) -> Vec<usize> {
        self.shared.lock().departed.clone()
    }
}

fn reader_loop(stream: TcpStream, peer: usize, shared: Arc<Shared>) {
    let mut reader = BufReader::new(stream);
    loop {
        match read_frame(&mut reader) {
            Ok(Some(Frame::Control {
                message: Control::Goodbye,
                ..
            })) => {
                shared.mark(peer, true);
                return;
            }
            Ok(Some(frame)) => shared.push(frame),
            Ok(None) | Err(_) => {
                shared.mark(peer, false);
                return;
            }
        }
    }
}

impl Transport for TcpTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.world_size
    }

    fn send(&self, target: usize, frame: Frame) -> Result<(), TransportError> {
        check_rank(target, self.world_size)?;
        if target == self.rank {
            self.shared.push(frame);
            return Ok(());
        }
        let bytes = frame.encode()?;
        if self.shared.lock().broken.contains(&target) {
            return Err(TransportError::TransportClosed);
        }
        let writers = self.writers.lock().unwrap_or_else(|p| p.into_inner());
        match &writers.channels[target] {
            Some(tx) => tx.send(bytes).map_err(|_| TransportError::TransportClosed),
            None => Ok(()),
        }
    }

    fn poll(&self, timeout: Duration) -> Result<Vec<Frame>, TransportError> {
        let deadline = Instant::now() + timeout;
        let mut inbox = self.shared.lock();
        loop {
            if !inbox.frames.is_empty() {
                return Ok(inbox.frames.drain(..).collect());
            }
            if !inbox.broken.is_empty() {
                return Err(TransportError::TransportClosed);
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(Vec::new());
            }
            inbox = self
                .shared
                .wake
                .wait_timeout(inbox, deadline - now)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    fn shutdown(&self) {
        let threads = {
            let mut w = self.writers.lock().unwrap_or_else(|p| p.into_inner());
            w.channels.iter_mut().for_each(|c| *c = None);
            std::mem::take(&mut w.threads)
        };
        for t in threads {
            let _ = t.join();
        }
    }

    fn abort(&self) {
        self.close_abruptly();
    }
}

impl TcpTransport {
    fn close_abruptly(&self) {
        for s in &self.streams {
            let _ = s.shutdown(Shutdown::Both);
        }
        self.shutdown();
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Event, Payload};

    fn mesh(p: usize) -> Vec<TcpTransport> {
        let roster = RankRoster::free_localhost(p).unwrap();
        let handles: Vec<_> = (0..p)
            .map(|r| {
                let roster = roster.clone();
                thread::spawn(move || TcpTransport::connect(&roster, r, Duration::from_secs(10)).unwrap())
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    }

    fn recv_all(t: &TcpTransport, n: usize) -> Vec<Frame> {
        let mut got = Vec::new();
        let deadline = Instant::now() + Duration::from_secs(10);
        while got.len() < n && Instant::now() < deadline {
            got.extend(t.poll(Duration::from_millis(50)).unwrap());
        }
        got
    }

    #[test]
    fn mesh_delivers_in_pair_order() {
        let ts = mesh(3);
        for src in 0..3 {
            for s in 0..50u64 {
                let e = Event::new(src, "n", Payload::longs(&[s as i64]), false, s).unwrap();
                ts[src].send((src + 1) % 3, Frame::Event(e)).unwrap();
            }
        }
        for (r, t) in ts.iter().enumerate() {
            let got = recv_all(t, 50);
            let seqs: Vec<u64> = got
                .iter()
                .map(|f| match f {
                    Frame::Event(e) => {
                        assert_eq!(e.source_rank, (r + 2) % 3);
                        e.sequence
                    }
                    _ => panic!("control frame"),
                })
                .collect();
            assert_eq!(seqs, (0..50).collect::<Vec<_>>());
        }
    }

    #[test]
    fn self_send_and_goodbye() {
        let ts = mesh(2);
        let e = Event::new(0, "me", Payload::none(), false, 0).unwrap();
        ts[0].send(0, Frame::Event(e)).unwrap();
        assert_eq!(recv_all(&ts[0], 1).len(), 1);
        ts[1].shutdown();
        let deadline = Instant::now() + Duration::from_secs(5);
        while ts[0].departed_peers().is_empty() && Instant::now() < deadline {
            assert!(ts[0].poll(Duration::from_millis(20)).unwrap().is_empty());
        }
        assert_eq!(ts[0].departed_peers(), vec![1]);
    }

    #[test]
    fn abrupt_close_is_reported() {
        let roster = RankRoster::free_localhost(2).unwrap();
        let r2 = roster.clone();
        let h = thread::spawn(move || TcpTransport::connect(&r2, 0, Duration::from_secs(10)).unwrap());
        // a fake rank 1 that says hello and then vanishes
        let mut s = dial(&roster.entry(0).unwrap().address(), Instant::now() + Duration::from_secs(10)).unwrap();
        s.write_all(&hello(1)).unwrap();
        let t0 = h.join().unwrap();
        drop(s);
        let deadline = Instant::now() + Duration::from_secs(5);
        let mut res = Ok(Vec::new());
        while matches!(&res, Ok(v) if v.is_empty()) && Instant::now() < deadline {
            res = t0.poll(Duration::from_millis(20));
        }
        assert_eq!(res, Err(TransportError::TransportClosed));
    }

    #[test]
    fn bind_failure() {
        let held = TcpListener::bind("127.0.0.1:0").unwrap();
        let port = held.local_addr().unwrap().port();
        let roster = RankRoster::localhost(&[port, port + 1]).unwrap();
        let err = TcpTransport::connect(&roster, 0, Duration::from_millis(100)).unwrap_err();
        assert!(matches!(err, TransportError::BindFailure(_)), "{err:?}");
    }
}
