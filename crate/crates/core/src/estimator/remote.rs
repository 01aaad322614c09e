use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::Duration;

use crate::geometry::Pose6;
use crate::raster::ImageBuffer;

use super::protocol::{
    read_message, write_message, EstimateReply, EstimateRequest, FrameError, Hello, ProtocolError, SCHEMA,
};
use super::{EstimateContext, EstimatorError, PoseEstimator};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(2);

struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

/// Client side of the estimator protocol. Reconnects lazily after a failure.
pub struct RemoteEstimator {
    address: String,
    timeout: Duration,
    conn: Option<Connection>,
    next_id: u64,
    server_name: String,
    send_truth: bool,
}

impl RemoteEstimator {
    /// Connect and perform the handshake.
    pub fn connect(address: &str, timeout: Duration) -> Result<Self, EstimatorError> {
        let mut est = Self {
            address: address.to_string(),
            timeout,
            conn: None,
            next_id: 1,
            server_name: String::new(),
            send_truth: false,
        };
        est.ensure_connected()?;
        Ok(est)
    }

    /// Attach the ground-truth pose to each request (for test-mode oracle services).
    pub fn with_truth(mut self, send: bool) -> Self {
        self.send_truth = send;
        self
    }

    /// Drop the connection; the next request reconnects.
    pub fn disconnect(&mut self) {
        self.conn = None;
    }

    pub fn server_name(&self) -> &str {
        &self.server_name
    }

    fn resolve(&self) -> Result<SocketAddr, EstimatorError> {
        self.address
            .to_socket_addrs()
            .ok()
            .and_then(|mut a| a.next())
            .ok_or_else(|| EstimatorError::Unreachable {
                address: self.address.clone(),
                message: "address does not resolve".into(),
            })
    }

    fn ensure_connected(&mut self) -> Result<&mut Connection, EstimatorError> {
        if self.conn.is_none() {
            let addr = self.resolve()?;
            let stream = TcpStream::connect_timeout(&addr, self.timeout).map_err(|e| EstimatorError::Unreachable {
                address: self.address.clone(),
                message: e.to_string(),
            })?;
            stream.set_read_timeout(Some(self.timeout)).ok();
            stream.set_write_timeout(Some(self.timeout)).ok();
            stream.set_nodelay(true).ok();
            let mut conn = Connection {
                reader: BufReader::new(
                    stream
                        .try_clone()
                        .map_err(|e| EstimatorError::ConnectionLost(e.to_string()))?,
                ),
                writer: BufWriter::new(stream),
            };
            write_message(&mut conn.writer, &Hello::client()).map_err(|e| self.frame_error(e))?;
            let hello: Hello = read_message(&mut conn.reader).map_err(|e| self.frame_error(e))?;
            if hello.op != "hello" || hello.schema != SCHEMA {
                return Err(
                    ProtocolError::Unexpected(format!("handshake op {:?} schema {}", hello.op, hello.schema)).into(),
                );
            }
            self.server_name = hello.name.unwrap_or_default();
            self.conn = Some(conn);
        }
        Ok(self.conn.as_mut().expect("just connected"))
    }

    fn frame_error(&self, e: FrameError) -> EstimatorError {
        match e {
            FrameError::Io(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                EstimatorError::Timeout(self.timeout)
            }
            FrameError::Io(e) => EstimatorError::ConnectionLost(e.to_string()),
            FrameError::Protocol(p) => EstimatorError::Protocol(p),
        }
    }

    fn round_trip(&mut self, req: &EstimateRequest) -> Result<EstimateReply, EstimatorError> {
        let conn = self.ensure_connected()?;
        let sent = write_message(&mut conn.writer, req);
        let reply = sent.and_then(|_| read_message::<_, EstimateReply>(&mut conn.reader));
        reply.map_err(|e| self.frame_error(e))
    }

    /// Send `image` and return the service's pose estimate.
    pub fn estimate_image(
        &mut self,
        image: &ImageBuffer,
        ctx: &EstimateContext,
    ) -> Result<(Pose6, Option<String>), EstimatorError> {
        let id = self.next_id;
        self.next_id += 1;
        let mut req = EstimateRequest::new(id, image);
        req.iteration = Some(ctx.iteration as u64);
        if self.send_truth {
            req.truth = ctx.truth.map(|t| t.to_pose6().to_file_units());
        }
        let result = self.round_trip(&req).and_then(|reply| {
            if reply.id != id {
                return Err(ProtocolError::IdMismatch {
                    expected: id,
                    got: reply.id,
                }
                .into());
            }
            let hash = reply.image_sha256.clone();
            match reply.into_pose()? {
                Ok(p) => Ok((Pose6::from_file_units(p), hash)),
                Err(msg) => Err(EstimatorError::Remote(msg)),
            }
        });
        // A late or partial reply would desynchronize the stream.
        if matches!(
            result,
            Err(EstimatorError::Timeout(_) | EstimatorError::ConnectionLost(_) | EstimatorError::Protocol(_))
        ) {
            self.conn = None;
        }
        result
    }
}

impl PoseEstimator for RemoteEstimator {
    fn name(&self) -> &str {
        if self.server_name.is_empty() {
            "remote"
        } else {
            &self.server_name
        }
    }

    fn estimate(&mut self, image: &ImageBuffer, ctx: &EstimateContext) -> Result<Pose6, EstimatorError> {
        self.estimate_image(image, ctx).map(|(p, _)| p)
    }
}
