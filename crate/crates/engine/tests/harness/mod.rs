//! Shared wiring for engine integration tests: a full loopback stack with a
//! man-in-the-middle proxy able to record, rewrite, drop, and inject frames
//! in either direction.

use std::sync::atomic::AtomicU64;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::rngs::StdRng;
use rand::SeedableRng;

use sealstor_blockdev::SimDevice;
use sealstor_core::crypto::{CipherSuite, FreshnessKey, TenantStorageKey};
use sealstor_core::DeviceGeometry;
use sealstor_engine::local::{Backend, LocalConfig, LocalEngine, RemoteBackend};
use sealstor_engine::nv::NvStore;
use sealstor_engine::remote::{RemoteConfig, RemoteEngine};
use sealstor_engine::service::RemoteService;
use sealstor_engine::window::ReplayWindow;
use sealstor_kbs::{KbsClient, KbsService, KeyBroker};
use sealstor_transport::{
    channel_pair, client_handshake, connect_in_proc, serve_link, server_handshake, ChannelLink,
    Credentials, Frame, FrameLink, RpcClient,
};

/// What the proxy does with a frame.
pub enum ProxyVerdict {
    Forward(Frame),
    /// Deliver these frames instead (empty = drop).
    Replace(Vec<Frame>),
}

type Hook = Box<dyn FnMut(Frame) -> ProxyVerdict + Send>;

#[derive(Default)]
pub struct ProxyCtl {
    /// Frames seen client -> server.
    pub to_server_log: Mutex<Vec<Frame>>,
    /// Frames seen server -> client.
    pub to_client_log: Mutex<Vec<Frame>>,
    pub to_server_hook: Mutex<Option<Hook>>,
    pub to_client_hook: Mutex<Option<Hook>>,
    injector_to_server: Mutex<Option<Arc<ChannelLink>>>,
}

impl ProxyCtl {
    /// Inject a raw frame toward the server, as a network adversary would.
    pub fn inject_to_server(&self, frame: Frame) {
        let guard = self.injector_to_server.lock();
        guard
            .as_ref()
            .expect("proxy wired")
            .send(frame)
            .expect("server alive");
    }
}

fn pump(
    from: Arc<ChannelLink>,
    to: Arc<ChannelLink>,
    log: impl Fn(&ProxyCtl) -> &Mutex<Vec<Frame>> + Send + 'static,
    hook: impl Fn(&ProxyCtl) -> &Mutex<Option<Hook>> + Send + 'static,
    ctl: Arc<ProxyCtl>,
) {
    std::thread::spawn(move || {
        while let Ok(frame) = from.recv() {
            log(&ctl).lock().push(frame.clone());
            let verdict = match hook(&ctl).lock().as_mut() {
                Some(h) => h(frame),
                None => ProxyVerdict::Forward(frame),
            };
            let frames = match verdict {
                ProxyVerdict::Forward(f) => vec![f],
                ProxyVerdict::Replace(fs) => fs,
            };
            for f in frames {
                if to.send(f).is_err() {
                    return;
                }
            }
        }
    });
}

pub struct Rig {
    pub device: Arc<SimDevice>,
    pub nv: Arc<NvStore>,
    pub remote: Arc<RemoteEngine>,
    pub broker: Arc<KeyBroker>,
    pub local: LocalEngine,
    pub proxy: Arc<ProxyCtl>,
    pub geometry: DeviceGeometry,
    _dir: Option<tempfile::TempDir>,
}

pub struct RigOptions {
    pub sectors: u64,
    pub remote: RemoteConfig,
    pub local: LocalConfig,
    pub counter_space: u64,
    pub seed: u64,
}

impl Default for RigOptions {
    fn default() -> Self {
        Self {
            sectors: 2048,
            remote: RemoteConfig::default(),
            local: LocalConfig {
                watermark: 64,
                lease_units: 4096,
                record_nonce_trace: true,
                ..LocalConfig::default()
            },
            counter_space: sealstor_kbs::COUNTER_SPACE_END,
            seed: 17,
        }
    }
}

pub fn build_rig(opts: RigOptions) -> Rig {
    let dir = tempfile::tempdir().expect("tempdir");
    let geometry = DeviceGeometry::with_defaults(opts.sectors).expect("geometry");
    let device = Arc::new(SimDevice::create(&dir.path().join("device.img"), geometry).unwrap());
    let nv = Arc::new(NvStore::new(
        opts.remote.journal_capacity,
        geometry.data_set_size(),
    ));
    build_rig_on(opts, device, nv, Some(dir))
}

pub fn build_rig_on(
    opts: RigOptions,
    device: Arc<SimDevice>,
    nv: Arc<NvStore>,
    dir: Option<tempfile::TempDir>,
) -> Rig {
    let geometry = device.geometry();
    let suite = CipherSuite::default();
    let device_id = opts.local.device_id.clone();

    let remote = RemoteEngine::start(
        Arc::clone(&device),
        suite,
        opts.remote.clone(),
        Arc::clone(&nv),
        &device_id,
        FreshnessKey::from_bytes([8; 32]),
    )
    .expect("remote start");

    let broker = Arc::new(KeyBroker::with_counter_space(suite, opts.counter_space));
    broker
        .register_tenant("tenant-0", TenantStorageKey::from_bytes([7; 32]))
        .unwrap();
    broker.register_device(&device_id).unwrap();
    let kbs_creds = Credentials::symmetric(b"kbs", [0x31; 32]);
    let mut rng_a = StdRng::seed_from_u64(opts.seed);
    let mut rng_b = StdRng::seed_from_u64(opts.seed ^ 0xA5A5);
    let kbs_rpc = connect_in_proc(
        &kbs_creds,
        &kbs_creds,
        &suite,
        1,
        Arc::new(KbsService::new(Arc::clone(&broker))),
        2,
        &mut rng_a,
        &mut rng_b,
    )
    .unwrap();
    let kbs = Arc::new(KbsClient::new(kbs_rpc));
    let device_key = kbs.provision_key("tenant-0", &device_id).unwrap();

    // Engine link with the proxy in the middle.
    let creds = Credentials::symmetric(b"engine", [0x32; 32]);
    let (client_link, proxy_client_side) = channel_pair();
    let (proxy_server_side, server_link) = channel_pair();
    let proxy_client_side = Arc::new(proxy_client_side);
    let proxy_server_side = Arc::new(proxy_server_side);
    let ctl = Arc::new(ProxyCtl::default());
    *ctl.injector_to_server.lock() = Some(Arc::clone(&proxy_server_side));
    pump(
        Arc::clone(&proxy_client_side),
        Arc::clone(&proxy_server_side),
        |c| &c.to_server_log,
        |c| &c.to_server_hook,
        Arc::clone(&ctl),
    );
    pump(
        proxy_server_side,
        proxy_client_side,
        |c| &c.to_client_log,
        |c| &c.to_client_hook,
        Arc::clone(&ctl),
    );

    let server_link: Arc<dyn FrameLink> = Arc::new(server_link);
    let service = Arc::new(RemoteService::new(Arc::clone(&remote)));
    let server = {
        let server_link = Arc::clone(&server_link);
        let mut rng = StdRng::seed_from_u64(opts.seed ^ 0x77);
        std::thread::spawn(move || {
            server_handshake(server_link.as_ref(), &Credentials::symmetric(b"engine", [0x32; 32]), &CipherSuite::default(), 9, &mut rng)
        })
    };
    let client_link: Arc<dyn FrameLink> = Arc::new(client_link);
    let mut rng = StdRng::seed_from_u64(opts.seed ^ 0x99);
    let session = client_handshake(client_link.as_ref(), &creds, &suite, &mut rng).expect("handshake");
    let server_session = server.join().unwrap().expect("server handshake");
    serve_link(server_link, server_session, service, 4);
    let rpc = RpcClient::new(client_link, session.clone());

    let backend = Backend::Remote(RemoteBackend {
        rpc,
        recv_window: Mutex::new(ReplayWindow::new(
            session.recv_start,
            opts.remote.window_size,
        )),
        j_send: AtomicU64::new(session.send_start),
    });
    let local = LocalEngine::new(suite, geometry, opts.local, device_key, Some(kbs), backend);

    Rig {
        device,
        nv,
        remote,
        broker,
        local,
        proxy: ctl,
        geometry,
        _dir: dir,
    }
}

/// Deterministic payload for a sector-sized buffer.
pub fn pattern(sector: u64, salt: u8, len: usize) -> Vec<u8> {
    let mut out = vec![0u8; len];
    for (i, b) in out.iter_mut().enumerate() {
        *b = (sector as u8)
            .wrapping_add(salt)
            .wrapping_add((i % 251) as u8)
            .wrapping_mul(31);
    }
    out
}
