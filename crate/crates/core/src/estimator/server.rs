use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crate::geometry::Pose6;

use super::protocol::{read_frame, write_message, EstimateReply, EstimateRequest, FrameError, Hello, ProtocolError};
use super::{CorruptionSchedule, OracleEstimator};

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub name: String,
    pub schedule: CorruptionSchedule,
    pub seed: u64,
    /// Pixel hash of the reference image; requests carrying this image and no
    /// ground truth are answered as the zero pose.
    pub reference_sha256: Option<String>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            name: "servonet-oracle".into(),
            schedule: CorruptionSchedule::default(),
            seed: 0,
            reference_sha256: None,
        }
    }
}

/// Reference implementation of the estimator service, answering from ground
/// truth attached to each request.
pub struct OracleServer {
    listener: TcpListener,
    config: ServerConfig,
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    active: Arc<Mutex<Option<TcpStream>>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(s) = self.active.lock().unwrap().take() {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_and_join();
        }
    }
}

impl OracleServer {
    pub fn bind(addr: &str, config: ServerConfig) -> io::Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            config,
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Serve connections one at a time, forever.
    pub fn serve(self) -> io::Result<()> {
        self.serve_until(&AtomicBool::new(false), &Mutex::new(None))
    }

    fn serve_until(&self, stop: &AtomicBool, active: &Mutex<Option<TcpStream>>) -> io::Result<()> {
        for stream in self.listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            match stream {
                Ok(s) => {
                    *active.lock().unwrap() = s.try_clone().ok();
                    // a broken client must not take the service down
                    let _ = self.handle(s);
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    pub fn spawn(self) -> io::Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let active = Arc::new(Mutex::new(None));
        let (flag, slot) = (stop.clone(), active.clone());
        let thread = std::thread::spawn(move || {
            let _ = self.serve_until(&flag, &slot);
        });
        Ok(ServerHandle {
            addr,
            stop,
            active,
            thread: Some(thread),
        })
    }

    fn handle(&self, stream: TcpStream) -> Result<(), FrameError> {
        stream.set_nodelay(true).ok();
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = BufWriter::new(stream);
        let mut oracle = OracleEstimator::new(self.config.schedule.clone(), self.config.seed);
        let mut served = 0u64;
        loop {
            let frame = match read_frame(&mut reader) {
                Ok(f) => f,
                Err(FrameError::Io(e)) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
                Err(FrameError::Protocol(p)) => {
                    // the stream cannot be resynchronized after a bad length
                    write_message(&mut writer, &EstimateReply::error(0, p.to_string()))?;
                    return Err(p.into());
                }
                Err(e) => return Err(e),
            };
            let value: serde_json::Value = match serde_json::from_slice(&frame) {
                Ok(v) => v,
                Err(e) => {
                    write_message(&mut writer, &EstimateReply::error(0, format!("malformed frame: {e}")))?;
                    continue;
                }
            };
            let id = value.get("id").and_then(|v| v.as_u64()).unwrap_or(0);
            match value.get("op").and_then(|v| v.as_str()) {
                Some("hello") => write_message(&mut writer, &Hello::server(&self.config.name))?,
                Some("estimate") => {
                    let reply = match serde_json::from_value::<EstimateRequest>(value) {
                        Ok(req) => {
                            let iteration = req.iteration.unwrap_or(served) as usize;
                            served += 1;
                            self.answer(&req, &mut oracle, iteration)
                        }
                        Err(e) => EstimateReply::error(id, format!("malformed request: {e}")),
                    };
                    write_message(&mut writer, &reply)?;
                }
                other => {
                    let msg = format!("unknown op {:?}", other.unwrap_or("<missing>"));
                    write_message(&mut writer, &EstimateReply::error(id, msg))?;
                }
            }
        }
    }

    fn answer(&self, req: &EstimateRequest, oracle: &mut OracleEstimator, iteration: usize) -> EstimateReply {
        let img = match req.decode_image() {
            Ok(img) => img,
            Err(e) => return EstimateReply::error(req.id, e.to_string()),
        };
        let hash = img.sha256_hex();
        let truth = match (req.truth, &self.config.reference_sha256) {
            (Some(t), _) if t.iter().all(|v| v.is_finite()) => Pose6::from_file_units(t),
            (Some(_), _) => {
                return EstimateReply::error(req.id, ProtocolError::Malformed("non-finite truth".into()).to_string())
            }
            (None, Some(r)) if *r == hash => Pose6::zero(),
            (None, _) => return EstimateReply::error(req.id, "no ground truth registered for this image"),
        };
        let est = oracle.estimate_truth(&truth, iteration);
        let mut reply = EstimateReply::pose(req.id, est.to_file_units());
        reply.image_sha256 = Some(hash);
        reply
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::protocol::{read_message, write_frame};
    use crate::estimator::{EstimateContext, EstimatorError, RemoteEstimator, DEFAULT_TIMEOUT};
    use crate::geometry::PoseTransform;
    use crate::raster::procedural_texture;
    use std::time::Duration;

    fn start(config: ServerConfig) -> ServerHandle {
        OracleServer::bind("127.0.0.1:0", config).unwrap().spawn().unwrap()
    }

    #[test]
    fn handshake_and_reference_image() {
        let reference = procedural_texture(32, 24, 3);
        let server = start(ServerConfig {
            reference_sha256: Some(reference.sha256_hex()),
            ..Default::default()
        });
        let mut est = RemoteEstimator::connect(&server.addr().to_string(), DEFAULT_TIMEOUT).unwrap();
        assert_eq!(est.server_name(), "servonet-oracle");
        let (pose, hash) = est.estimate_image(&reference, &EstimateContext::default()).unwrap();
        assert_eq!(pose, Pose6::zero());
        assert_eq!(hash.unwrap(), reference.sha256_hex());

        let other = procedural_texture(32, 24, 4);
        assert!(matches!(
            est.estimate_image(&other, &EstimateContext::default()),
            Err(EstimatorError::Remote(_))
        ));
        server.shutdown();
    }

    #[test]
    fn truth_is_echoed_and_hash_is_faithful() {
        let server = start(ServerConfig::default());
        let mut est = RemoteEstimator::connect(&server.addr().to_string(), DEFAULT_TIMEOUT)
            .unwrap()
            .with_truth(true);
        for seed in 0..5 {
            let img = procedural_texture(40 + seed as u32, 30, seed);
            let truth = Pose6::from_file_units([0.01, -0.002, 0.03, 1.5, -2.0, 30.0]);
            let ctx = EstimateContext {
                iteration: seed as usize,
                truth: Some(PoseTransform::from_pose6(&truth)),
            };
            let (pose, hash) = est.estimate_image(&img, &ctx).unwrap();
            assert!((pose.t - truth.t).norm() < 1e-12 && (pose.theta_u - truth.theta_u).norm() < 1e-12);
            assert_eq!(hash.unwrap(), img.sha256_hex());
        }
    }

    #[test]
    fn malformed_frames_get_error_replies_and_connection_survives() {
        let server = start(ServerConfig::default());
        let stream = TcpStream::connect(server.addr()).unwrap();
        stream.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
        let mut r = BufReader::new(stream.try_clone().unwrap());
        let mut w = stream;
        write_message(&mut w, &Hello::client()).unwrap();
        let hello: Hello = read_message(&mut r).unwrap();
        assert_eq!((hello.op.as_str(), hello.schema), ("hello", 1));

        write_frame(&mut w, br#"{"id": 41, "op": "estimate", "width": 2}"#).unwrap();
        let reply: EstimateReply = read_message(&mut r).unwrap();
        assert_eq!(reply.id, 41);
        assert!(reply.error.is_some());

        write_frame(
            &mut w,
            br#"{"id": 42, "op": "estimate", "width": 2, "height": 2, "encoding": "png-base64", "image": "!!"}"#,
        )
        .unwrap();
        let reply: EstimateReply = read_message(&mut r).unwrap();
        assert_eq!(reply.id, 42);
        assert!(reply.error.unwrap().contains("base64"));

        write_frame(&mut w, b"not json").unwrap();
        let reply: EstimateReply = read_message(&mut r).unwrap();
        assert!(reply.error.is_some());

        write_frame(&mut w, br#"{"id": 43, "op": "dance"}"#).unwrap();
        let reply: EstimateReply = read_message(&mut r).unwrap();
        assert_eq!(reply.id, 43);

        write_message(&mut w, &Hello::client()).unwrap();
        let again: Hello = read_message(&mut r).unwrap();
        assert_eq!(again.schema, 1);
    }

    #[test]
    fn fixed_pose_echo_and_short_pose() {
        // a hand-rolled service answering every request with a canned pose
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let t = std::thread::spawn(move || {
            for pose in [vec![0.01, 0.0, 0.0, 0.0, 0.0, 0.0], vec![1.0, 2.0, 3.0, 4.0, 5.0]] {
                let (s, _) = listener.accept().unwrap();
                let mut r = BufReader::new(s.try_clone().unwrap());
                let mut w = s;
                let _: Hello = read_message(&mut r).unwrap();
                write_message(&mut w, &Hello::server("echo")).unwrap();
                let req: EstimateRequest = read_message(&mut r).unwrap();
                let reply = EstimateReply {
                    id: req.id,
                    pose: Some(pose),
                    error: None,
                    image_sha256: None,
                };
                write_message(&mut w, &reply).unwrap();
            }
        });
        let img = procedural_texture(8, 8, 0);
        let mut est = RemoteEstimator::connect(&addr.to_string(), DEFAULT_TIMEOUT).unwrap();
        let (pose, _) = est.estimate_image(&img, &EstimateContext::default()).unwrap();
        assert_eq!(pose.t.x, 0.01);
        assert_eq!(pose.to_file_units()[1..], [0.0; 5]);
        let mut est = RemoteEstimator::connect(&addr.to_string(), DEFAULT_TIMEOUT).unwrap();
        assert!(matches!(
            est.estimate_image(&img, &EstimateContext::default()),
            Err(EstimatorError::Protocol(_))
        ));
        t.join().unwrap();
    }

    #[test]
    fn silent_service_times_out_and_missing_service_is_unreachable() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let t = std::thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            let mut r = BufReader::new(s.try_clone().unwrap());
            let mut w = s;
            let _: Hello = read_message(&mut r).unwrap();
            write_message(&mut w, &Hello::server("mute")).unwrap();
            let _: EstimateRequest = read_message(&mut r).unwrap();
            std::thread::sleep(Duration::from_millis(600));
        });
        let mut est = RemoteEstimator::connect(&addr.to_string(), Duration::from_millis(200)).unwrap();
        let img = procedural_texture(8, 8, 0);
        assert!(matches!(
            est.estimate_image(&img, &EstimateContext::default()),
            Err(EstimatorError::Timeout(_))
        ));
        t.join().unwrap();

        let closed = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
        assert!(matches!(
            RemoteEstimator::connect(&closed.to_string(), Duration::from_millis(200)),
            Err(EstimatorError::Unreachable { .. })
        ));
    }

    #[test]
    fn reconnects_after_server_side_close() {
        let server = start(ServerConfig::default());
        let mut est = RemoteEstimator::connect(&server.addr().to_string(), DEFAULT_TIMEOUT)
            .unwrap()
            .with_truth(true);
        let img = procedural_texture(8, 8, 0);
        let ctx = EstimateContext {
            iteration: 0,
            truth: Some(PoseTransform::identity()),
        };
        est.estimate_image(&img, &ctx).unwrap();
        est.disconnect();
        assert_eq!(est.estimate_image(&img, &ctx).unwrap().0, Pose6::zero());
    }
}
