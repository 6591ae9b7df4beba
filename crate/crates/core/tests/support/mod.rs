#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Instant;

use commuter_core::GeoPoint;
use rand::Rng;

/// Reference DBSCAN: all-pairs neighborhoods, connected components of core
/// points, border points joined to the earliest-seeded adjacent component.
/// Returns the sorted partition (noise omitted).
pub fn brute_force_dbscan(points: &[GeoPoint], eps: f64, min_pts: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let close = |a: &GeoPoint, b: &GeoPoint| {
        let (dy, dx) = (a.lat - b.lat, a.lon - b.lon);
        (dy * dy + dx * dx).sqrt() <= eps
    };
    let nbrs: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| close(&points[i], &points[j])).collect())
        .collect();
    let core: Vec<bool> = nbrs.iter().map(|v| v.len() >= min_pts).collect();

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..n {
        if !core[i] {
            continue;
        }
        for &j in &nbrs[i] {
            if core[j] {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    // union by smaller index keeps each root at the component's minimum core index
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = if core[i] {
            Some(find(&mut parent, i))
        } else {
            nbrs[i].iter().filter(|&&j| core[j]).map(|&j| find(&mut parent, j)).min()
        };
        if let Some(r) = root {
            groups.entry(r).or_default().push(i);
        }
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort();
    out
}

/// Random instance of blobs plus uniform noise inside a small box.
pub fn blob_instance(rng: &mut impl Rng, n: usize, eps: f64) -> Vec<GeoPoint> {
    let blobs = rng.random_range(1..=5);
    let centers: Vec<GeoPoint> = (0..blobs)
        .map(|_| GeoPoint {
            lat: 33.7 + rng.random_range(0.0..0.02),
            lon: -84.4 + rng.random_range(0.0..0.02),
        })
        .collect();
    let noise_share = rng.random_range(0.0..0.5);
    (0..n)
        .map(|_| {
            if rng.random_bool(noise_share) {
                GeoPoint {
                    lat: 33.7 + rng.random_range(-0.005..0.025),
                    lon: -84.4 + rng.random_range(-0.005..0.025),
                }
            } else {
                let c = centers[rng.random_range(0..centers.len())];
                let spread = eps * rng.random_range(0.3..2.0);
                GeoPoint {
                    lat: c.lat + rng.random_range(-spread..spread),
                    lon: c.lon + rng.random_range(-spread..spread),
                }
            }
        })
        .collect()
}

/// What the stub server saw.
#[derive(Debug, Clone)]
pub struct Hit {
    pub at: Instant,
    pub lat: f64,
    pub lon: f64,
}

pub type Responder = dyn Fn(f64, f64) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server answering `GET /reverse?lat=..&lon=..` with the
/// responder's status and body. One connection per request.
pub struct StubServer {
    pub base_url: String,
    hits: Arc<Mutex<Vec<Hit>>>,
}

impl StubServer {
    pub fn start(responder: Box<Responder>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub");
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(Mutex::new(Vec::new()));
        let seen = Arc::clone(&hits);
        let responder: Arc<Responder> = Arc::from(responder);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let seen = Arc::clone(&seen);
                let responder = Arc::clone(&responder);
                thread::spawn(move || serve(stream, &seen, &*responder));
            }
        });
        Self {
            base_url: format!("http://{addr}/reverse"),
            hits,
        }
    }

    pub fn hits(&self) -> Vec<Hit> {
        self.hits.lock().unwrap().clone()
    }

    pub fn hit_count(&self) -> usize {
        self.hits.lock().unwrap().len()
    }
}

fn serve(stream: TcpStream, seen: &Mutex<Vec<Hit>>, responder: &Responder) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).is_err() {
        return;
    }
    let at = Instant::now();
    loop {
        let mut line = String::new();
        match reader.read_line(&mut line) {
            Ok(0) | Err(_) => break,
            Ok(_) if line == "\r\n" || line == "\n" => break,
            Ok(_) => {}
        }
    }
    let target = request_line.split_whitespace().nth(1).unwrap_or("");
    let query = target.split_once('?').map_or("", |(_, q)| q);
    let param = |k: &str| {
        query
            .split('&')
            .filter_map(|kv| kv.split_once('='))
            .find(|(key, _)| *key == k)
            .and_then(|(_, v)| v.parse::<f64>().ok())
    };
    let (lat, lon) = (param("lat").unwrap_or(f64::NAN), param("lon").unwrap_or(f64::NAN));
    seen.lock().unwrap().push(Hit { at, lat, lon });
    let (status, body) = responder(lat, lon);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.flush();
}
