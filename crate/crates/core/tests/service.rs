use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::Arc;
use std::time::Duration;

use serde_json::Value;
use winsorcam::bundle::{write_bundle, SaliencyBundle};
use winsorcam::cli::{cmd_compute, cmd_sweep, Method, RenderOptions};
use winsorcam::metrics::BinaryMask;
use winsorcam::microcnn::make_synthetic_fixture;
use winsorcam::render::decode_png;
use winsorcam::service::{serve, Catalog, Response, Service};
use winsorcam::WinsorParams;

fn fixture_bundle(seed: u64, with_mask: bool) -> SaliencyBundle {
    let f = make_synthetic_fixture(seed);
    let mask = with_mask.then(|| BinaryMask::from_tensor(&f.mask).unwrap());
    SaliencyBundle::from_model(&f.model, &f.image, f.target_class, mask).unwrap()
}

fn service() -> Service {
    let bundles = BTreeMap::from([
        ("masked".to_string(), fixture_bundle(0, true)),
        ("plain".to_string(), fixture_bundle(1, false)),
    ]);
    Service::new(Catalog::from_bundles(bundles), None)
}

fn json(r: &Response) -> Value {
    assert_eq!(r.content_type, "application/json");
    serde_json::from_slice(&r.body).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn bundle_listing() {
    let dir = tempfile::tempdir().unwrap();
    let (catalog, failed) = Catalog::load(dir.path()).unwrap();
    assert!(failed.is_empty());
    let empty = Service::new(catalog, None).handle("GET", "/v1/bundles");
    assert_eq!((empty.status, json(&empty)), (200, serde_json::json!([])));

    write_bundle(&fixture_bundle(2, true), dir.path().join("b.wcam")).unwrap();
    write_bundle(&fixture_bundle(3, false), dir.path().join("a.wcam")).unwrap();
    std::fs::write(dir.path().join("broken.wcam"), b"WCAM").unwrap();
    let (catalog, failed) = Catalog::load(dir.path()).unwrap();
    assert_eq!(failed.len(), 1);
    let list = json(&Service::new(catalog, None).handle("GET", "/v1/bundles"));
    let ids: Vec<_> = list.as_array().unwrap().iter().map(|b| b["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["a", "b"]);
    assert_eq!(list[0]["has_mask"], false);
    assert_eq!(list[1]["has_mask"], true);
    assert_eq!(list[1]["layers"].as_array().unwrap().len(), 5);
}

#[test]
fn heatmap_matches_compute_output() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("masked.wcam");
    write_bundle(&fixture_bundle(0, true), &path).unwrap();
    let out = dir.path().join("out");
    cmd_compute(&path, &out, &RenderOptions::default()).unwrap();

    let (catalog, _) = Catalog::load(dir.path()).unwrap();
    let svc = Service::new(catalog, None);
    for view in ["fused", "overlay", "binary"] {
        let r = svc.handle("GET", &format!("/v1/heatmap?bundle=masked&p=50&view={view}"));
        assert_eq!((r.status, r.content_type), (200, "image/png"));
        assert_eq!(r.body, std::fs::read(out.join(format!("{view}.png"))).unwrap(), "{view}");
    }
    let default_view = svc.handle("GET", "/v1/heatmap?bundle=masked");
    assert_eq!(default_view.body, std::fs::read(out.join("fused.png")).unwrap());
}

#[test]
fn binary_view_has_two_colours() {
    let svc = service();
    let r = svc.handle("GET", "/v1/heatmap?bundle=masked&p=30&view=binary&interp=nearest");
    let png = decode_png(&r.body).unwrap();
    let mut colours: Vec<&[u8]> = png.data.chunks_exact(png.channels).collect();
    colours.sort_unstable();
    colours.dedup();
    assert_eq!(colours.len(), 2);
}

#[test]
fn error_statuses() {
    let svc = service();
    let cases = [
        ("GET", "/v1/heatmap?bundle=nope", 404),
        ("GET", "/v1/heatmap", 400),
        ("GET", "/v1/heatmap?bundle=masked&p=101", 400),
        ("GET", "/v1/heatmap?bundle=masked&p=abc", 400),
        ("GET", "/v1/heatmap?bundle=masked&view=side", 400),
        ("GET", "/v1/heatmap?bundle=masked&alpha=2", 400),
        ("GET", "/v1/importances?bundle=masked&agg=median", 400),
        ("GET", "/v1/importances?bundle=masked&bounds=1,0.5", 400),
        ("GET", "/v1/metrics?bundle=masked&range=sideways", 400),
        ("GET", "/v1/metrics?bundle=plain", 409),
        ("GET", "/v1/nothing", 404),
        ("POST", "/v1/bundles", 405),
    ];
    for (method, target, status) in cases {
        let r = svc.handle(method, target);
        assert_eq!(r.status, status, "{method} {target}");
        assert!(json(&r)["kind"].is_string());
    }
}

#[test]
fn importances_endpoint() {
    let svc = service();
    let full = json(&svc.handle("GET", "/v1/importances?bundle=masked&p=100"));
    assert_eq!(full["winsorized"], full["raw"]);

    let mut last = f64::NEG_INFINITY;
    for p in (0..=100).step_by(10) {
        let doc = json(&svc.handle("GET", &format!("/v1/importances?bundle=masked&p={p}&agg=max")));
        let t = doc["threshold"].as_f64().unwrap();
        assert!(t >= last, "p={p}");
        last = t;
        let w = floats(&doc["normalized"]);
        assert!(w.iter().all(|&x| x == 0.0 || (0.1..=1.0).contains(&x)));
        assert!(floats(&doc["winsorized"]).iter().all(|&x| x <= t));
    }

    let custom = json(&svc.handle("GET", "/v1/importances?bundle=masked&bounds=0.2,0.8&range=post_clip"));
    assert_eq!(custom["range"], "post_clip");
    let w = floats(&custom["normalized"]);
    assert!(w.iter().all(|&x| x == 0.0 || (0.2..=0.8).contains(&x)));
}

#[test]
fn metrics_agree_with_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("masked.wcam");
    write_bundle(&fixture_bundle(0, true), &path).unwrap();
    let report = cmd_sweep(&path, &[20.0, 70.0], &WinsorParams::default(), None).unwrap();
    let (catalog, _) = Catalog::load(dir.path()).unwrap();
    let svc = Service::new(catalog, None);

    let mut baselines = Vec::new();
    for rec in report.records.iter().filter(|r| r.method == Method::Winsor) {
        let m = json(&svc.handle("GET", &format!("/v1/metrics?bundle=masked&p={}", rec.p.unwrap())));
        assert_eq!(m["iou"].as_f64().unwrap(), rec.iou);
        assert_eq!(m["com_distance_px"].as_f64().unwrap(), rec.com_distance_px);
        baselines.push(m["baselines"].clone());
    }
    assert_eq!(baselines[0], baselines[1]);
    let naive = report.baseline(Method::NaiveMean);
    assert_eq!(baselines[0]["naive_mean"]["iou"].as_f64().unwrap(), naive.iou);
}

#[test]
fn stack_is_built_once_under_concurrency() {
    let svc = service();
    assert_eq!(svc.catalog.cached_stacks(), 0);
    std::thread::scope(|s| {
        for p in 0..8 {
            let svc = &svc;
            s.spawn(move || {
                let r = svc.handle("GET", &format!("/v1/importances?bundle=masked&p={}", p * 10));
                assert_eq!(r.status, 200);
            });
        }
    });
    assert_eq!(svc.catalog.cached_stacks(), 1);
    let a = svc.catalog.stack("masked").unwrap();
    let b = svc.catalog.stack("masked").unwrap();
    assert!(Arc::ptr_eq(&a, &b));
}

#[test]
fn static_files() {
    let embedded = service().handle("GET", "/");
    assert_eq!((embedded.status, embedded.content_type), (200, "text/html; charset=utf-8"));
    assert!(String::from_utf8(embedded.body).unwrap().contains("/v1/heatmap"));
    assert_eq!(service().handle("GET", "/app.js").status, 404);

    let dir = tempfile::tempdir().unwrap();
    let assets = dir.path().join("ui");
    std::fs::create_dir(&assets).unwrap();
    std::fs::write(assets.join("index.html"), "<p>ui</p>").unwrap();
    std::fs::write(assets.join("app.js"), "let x = 1;").unwrap();
    std::fs::write(dir.path().join("secret.txt"), "no").unwrap();
    let svc = Service::new(Catalog::from_bundles(BTreeMap::new()), Some(assets));

    let index = svc.handle("GET", "/");
    assert_eq!(index.body, b"<p>ui</p>");
    let js = svc.handle("GET", "/app.js");
    assert_eq!((js.status, js.content_type), (200, "text/javascript"));
    assert_eq!(svc.handle("GET", "/../secret.txt").status, 404);
    assert_eq!(svc.handle("GET", "/missing.css").status, 404);
}

fn http_get(addr: SocketAddr, target: &str) -> (u16, Vec<u8>) {
    let mut stream = (0..100)
        .find_map(|_| {
            TcpStream::connect(addr).ok().or_else(|| {
                std::thread::sleep(Duration::from_millis(20));
                None
            })
        })
        .expect("server did not start");
    write!(stream, "GET {target} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).unwrap();
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").unwrap();
    let head = String::from_utf8_lossy(&raw[..split]);
    let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    (status, raw[split + 4..].to_vec())
}

#[test]
fn real_http_round_trip() {
    let addr = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let svc = Arc::new(service());
    let expected = svc.handle("GET", "/v1/heatmap?bundle=masked&p=40").body;
    std::thread::spawn(move || serve(svc, addr, 2));

    let (status, body) = http_get(addr, "/v1/bundles");
    assert_eq!(status, 200);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap().as_array().unwrap().len(), 2);
    assert_eq!(http_get(addr, "/v1/heatmap?bundle=masked&p=40"), (200, expected));
    assert_eq!(http_get(addr, "/v1/metrics?bundle=plain").0, 409);
}
