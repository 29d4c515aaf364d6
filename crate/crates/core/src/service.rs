//! Local HTTP service over a directory of bundles.
//!
//! Routes (all `GET`):
//!
//! | path | query | response |
//! |---|---|---|
//! | `/v1/bundles` | | `[{id, layers, has_mask, class}]`, sorted by id |
//! | `/v1/heatmap` | `bundle, p, agg, interp, view, alpha, bounds, range` | PNG |
//! | `/v1/importances` | `bundle, p, agg, bounds, range` | importance JSON |
//! | `/v1/metrics` | `bundle, p, agg, interp, bounds, range` | `{iou, com_distance_px, baselines}` |
//!
//! Everything else is served from the static directory, or an embedded page
//! at `/` when none is configured. Errors are JSON `{"error", "kind"}` with
//! 400 for bad parameters, 404 for unknown bundles or paths and 409 when
//! metrics are requested for a bundle without a mask.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use serde_json::json;

use crate::bundle::{read_bundle, SaliencyBundle};
use crate::cli::{
    baseline_localization, bundle_id, importance_document, list_bundles, render_view, to_json_bytes,
    winsor_localization, RenderOptions, View,
};
use crate::error::{Error, Result};
use crate::winsor::LayerStack;

const INDEX_HTML: &str = include_str!("../data/index.html");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

impl Response {
    fn json(status: u16, value: &impl serde::Serialize) -> Self {
        Response {
            status,
            content_type: "application/json",
            body: to_json_bytes(value),
        }
    }

    fn error(status: u16, kind: &str, message: impl Into<String>) -> Self {
        Response::json(status, &json!({ "error": message.into(), "kind": kind }))
    }

    fn from_error(err: &Error) -> Self {
        let status = match err {
            Error::InvalidArgument(_) => 400,
            Error::MissingMask { .. } => 409,
            _ => 500,
        };
        Response::error(status, err.kind(), err.to_string())
    }
}

type StackKey = (String, usize);
type StackCell = Arc<OnceLock<std::result::Result<Arc<LayerStack>, String>>>;

/// Bundles loaded at startup plus a per-(bundle, class) cache of the
/// `p`-independent Grad-CAM stage.
pub struct Catalog {
    bundles: BTreeMap<String, SaliencyBundle>,
    stacks: Mutex<HashMap<StackKey, StackCell>>,
}

impl Catalog {
    /// Loads every bundle in `dir`. Unreadable bundles are returned
    /// alongside the catalog rather than aborting the load.
    pub fn load(dir: &Path) -> Result<(Self, Vec<(PathBuf, Error)>)> {
        let mut bundles = BTreeMap::new();
        let mut failed = Vec::new();
        for path in list_bundles(dir)? {
            match read_bundle(&path) {
                Ok(b) => {
                    bundles.insert(bundle_id(&path), b);
                }
                Err(e) => failed.push((path, e)),
            }
        }
        Ok((Catalog::from_bundles(bundles), failed))
    }

    pub fn from_bundles(bundles: BTreeMap<String, SaliencyBundle>) -> Self {
        Catalog {
            bundles,
            stacks: Mutex::new(HashMap::new()),
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.bundles.keys().map(String::as_str)
    }

    pub fn get(&self, id: &str) -> Option<&SaliencyBundle> {
        self.bundles.get(id)
    }

    /// Grad-CAM stack of a bundle, built at most once even under concurrent
    /// requests.
    pub fn stack(&self, id: &str) -> Result<Arc<LayerStack>> {
        let bundle = self
            .get(id)
            .ok_or_else(|| Error::invalid(format!("unknown bundle `{id}`")))?;
        let key = (id.to_string(), bundle.manifest.class_index);
        let cell = self.stacks.lock().expect("cache lock").entry(key).or_default().clone();
        cell.get_or_init(|| {
            LayerStack::new(&bundle.layers)
                .map(Arc::new)
                .map_err(|e| e.to_string())
        })
        .clone()
        .map_err(Error::InvalidArgument)
    }

    /// Number of Grad-CAM stacks built so far.
    pub fn cached_stacks(&self) -> usize {
        self.stacks
            .lock()
            .expect("cache lock")
            .values()
            .filter(|c| c.get().is_some())
            .count()
    }
}

pub struct Service {
    pub catalog: Catalog,
    pub static_dir: Option<PathBuf>,
}

fn query_map(query: &str) -> HashMap<String, String> {
    form_urlencoded::parse(query.as_bytes()).into_owned().collect()
}

fn opt<T: std::str::FromStr<Err = Error>>(q: &HashMap<String, String>, key: &str) -> Result<Option<T>> {
    q.get(key).map(|v| v.parse::<T>()).transpose()
}

fn render_options(q: &HashMap<String, String>) -> Result<RenderOptions> {
    let mut opts = RenderOptions::default();
    if let Some(p) = q.get("p") {
        opts.params.p = p
            .parse()
            .map_err(|_| Error::invalid(format!("percentile must be a number, got `{p}`")))?;
    }
    if let Some(alpha) = q.get("alpha") {
        opts.alpha = alpha
            .parse()
            .map_err(|_| Error::invalid(format!("alpha must be a number, got `{alpha}`")))?;
    }
    if let Some(v) = opt(q, "agg")? {
        opts.params.aggregation = v;
    }
    if let Some(v) = opt(q, "interp")? {
        opts.params.interp = v;
    }
    if let Some(v) = opt(q, "bounds")? {
        opts.params.bounds = v;
    }
    if let Some(v) = opt(q, "range")? {
        opts.params.range = v;
    }
    opts.validate()?;
    Ok(opts)
}

impl Service {
    pub fn new(catalog: Catalog, static_dir: Option<PathBuf>) -> Self {
        Service { catalog, static_dir }
    }

    /// Pure request handler: `target` is the request path plus query string.
    pub fn handle(&self, method: &str, target: &str) -> Response {
        if method != "GET" && method != "HEAD" {
            return Response::error(405, "method_not_allowed", format!("{method} is not supported"));
        }
        let (path, query) = target.split_once('?').unwrap_or((target, ""));
        let q = query_map(query);
        match path {
            "/v1/bundles" => self.bundles(),
            "/v1/heatmap" => self.with_bundle(&q, |id, b| self.heatmap(id, b, &q)),
            "/v1/importances" => self.with_bundle(&q, |id, b| self.importances(id, b, &q)),
            "/v1/metrics" => self.with_bundle(&q, |id, b| self.metrics(id, b, &q)),
            p if p.starts_with("/v1/") => Response::error(404, "not_found", format!("no route {p}")),
            p => self.static_file(p),
        }
    }

    fn bundles(&self) -> Response {
        let list: Vec<_> = self
            .catalog
            .bundles
            .iter()
            .map(|(id, b)| {
                json!({
                    "id": id,
                    "layers": b.layers.iter().map(|l| l.name.as_str()).collect::<Vec<_>>(),
                    "has_mask": b.has_mask(),
                    "class": b.manifest.class_index,
                })
            })
            .collect();
        Response::json(200, &list)
    }

    fn with_bundle(
        &self,
        q: &HashMap<String, String>,
        f: impl FnOnce(&str, &SaliencyBundle) -> Result<Response>,
    ) -> Response {
        let Some(id) = q.get("bundle") else {
            return Response::error(400, "invalid_argument", "missing `bundle` parameter");
        };
        let Some(bundle) = self.catalog.get(id) else {
            return Response::error(404, "unknown_bundle", format!("unknown bundle `{id}`"));
        };
        f(id, bundle).unwrap_or_else(|e| Response::from_error(&e))
    }

    fn heatmap(&self, id: &str, bundle: &SaliencyBundle, q: &HashMap<String, String>) -> Result<Response> {
        let opts = render_options(q)?;
        let view = opt::<View>(q, "view")?.unwrap_or(View::Fused);
        let stack = self.catalog.stack(id)?;
        Ok(Response {
            status: 200,
            content_type: "image/png",
            body: render_view(bundle, &stack, &opts, view)?,
        })
    }

    fn importances(&self, id: &str, bundle: &SaliencyBundle, q: &HashMap<String, String>) -> Result<Response> {
        let opts = render_options(q)?;
        let importance = self.catalog.stack(id)?.importance(&opts.params)?;
        Ok(Response::json(200, &importance_document(id, bundle, &importance)))
    }

    fn metrics(&self, id: &str, bundle: &SaliencyBundle, q: &HashMap<String, String>) -> Result<Response> {
        let opts = render_options(q)?;
        if !bundle.has_mask() {
            return Err(Error::MissingMask { bundle: id.to_string() });
        }
        let stack = self.catalog.stack(id)?;
        let loc = winsor_localization(id, bundle, &stack, &opts.params)?;
        let (last, mean) = baseline_localization(id, bundle, &stack, opts.params.interp)?;
        Ok(Response::json(
            200,
            &json!({
                "bundle": id,
                "p": opts.params.p,
                "aggregation": opts.params.aggregation,
                "interp": opts.params.interp,
                "iou": loc.iou,
                "com_distance_px": loc.com_distance_px,
                "baselines": { "final_layer": last, "naive_mean": mean },
            }),
        ))
    }

    fn static_file(&self, path: &str) -> Response {
        let rel = path.trim_start_matches('/');
        let rel = if rel.is_empty() { "index.html" } else { rel };
        let not_found = || Response::error(404, "not_found", format!("no file {path}"));
        let Some(dir) = &self.static_dir else {
            return if rel == "index.html" {
                Response {
                    status: 200,
                    content_type: "text/html; charset=utf-8",
                    body: INDEX_HTML.as_bytes().to_vec(),
                }
            } else {
                not_found()
            };
        };
        if !Path::new(rel).components().all(|c| matches!(c, Component::Normal(_))) {
            return not_found();
        }
        match fs::read(dir.join(rel)) {
            Ok(body) => Response {
                status: 200,
                content_type: content_type(rel),
                body,
            },
            Err(_) => not_found(),
        }
    }
}

fn content_type(path: &str) -> &'static str {
    match path.rsplit('.').next() {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("png") => "image/png",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

/// Serves `service` on `addr` with `workers` threads. Blocks forever.
pub fn serve(service: Arc<Service>, addr: SocketAddr, workers: usize) -> Result<()> {
    let server = tiny_http::Server::http(addr)
        .map_err(|e| Error::io(addr.to_string(), std::io::Error::other(e.to_string())))?;
    let server = Arc::new(server);
    let handles: Vec<_> = (0..workers.max(1))
        .map(|_| {
            let (server, service) = (server.clone(), service.clone());
            std::thread::spawn(move || {
                for request in server.incoming_requests() {
                    let resp = service.handle(request.method().as_str(), request.url());
                    let header = tiny_http::Header::from_bytes("Content-Type", resp.content_type)
                        .expect("static header");
                    let reply = tiny_http::Response::from_data(resp.body)
                        .with_status_code(resp.status)
                        .with_header(header);
                    let _ = request.respond(reply);
                }
            })
        })
        .collect();
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}
