//! Authority → VO → site over real TCP connections.

use std::collections::BTreeSet;
use std::net::TcpListener;
use std::time::Duration;

use gums_core::domain::{parse_roles, AttributeProjection, DistinguishedName, PeerIdentity};
use gums_core::feedup::{sync_up, FeedUpState, TcpUpstream};
use gums_core::policy::{NullSink, SitePolicy};
use gums_core::provision::{AutoBackend, Latency};
use gums_core::registry::{RegistryNode, RegistryServer};
use gums_core::sim::synthetic_record;
use gums_core::store::{LocalStore, UserStatus};
use gums_core::sync::{Site, SiteOptions, SyncError, TcpSource, VoEndpoint};
use gums_core::transport::Credential;

const TIMEOUT: Duration = Duration::from_secs(10);

fn dn(s: &str) -> DistinguishedName {
    DistinguishedName::parse(s).unwrap()
}

fn pair(a: &str, b: &str) -> (Credential, Credential) {
    let mut x = Credential::new(dn(a), format!("fp:{a}"));
    let mut y = Credential::new(dn(b), format!("fp:{b}"));
    x.trust(y.dn().clone(), format!("fp:{b}")).unwrap();
    y.trust(x.dn().clone(), format!("fp:{a}")).unwrap();
    (x, y)
}

fn site(dir: &std::path::Path, addr: String, credential: Credential) -> Site {
    let mut store = LocalStore::open(dir.join("db")).unwrap();
    store.initdb("grid", 1, 99, false).unwrap();
    Site::new(
        store,
        SitePolicy::default().map_roles_to_same_name(["simulation", "analysis"]),
        Box::new(AutoBackend::new(Latency::None)),
        Box::new(NullSink),
        vec![Box::new(TcpSource {
            endpoint: VoEndpoint {
                addr,
                vo_path: "/atlas".into(),
                projection: AttributeProjection::parse("dn,roles").unwrap(),
            },
            credential,
            insecure: false,
            timeout: TIMEOUT,
        })],
        SiteOptions {
            auto_approve: true,
            gridmap_path: Some(dir.join("grid-mapfile")),
            ..SiteOptions::default()
        },
    )
    .unwrap()
}

#[test]
fn authority_feeds_vo_and_site_follows() {
    let tmp = tempfile::tempdir().unwrap();
    let journal = tmp.path().join("atlas.journal");
    let (mut vo_for_ra, ra_cred) = pair("/O=Grid/OU=VO/CN=atlas", "/O=Grid/OU=RA/CN=east");
    let (site_cred, _) = pair("/O=Grid/OU=Site/CN=bnl", "/O=Grid/OU=VO/CN=atlas");
    vo_for_ra.trust(site_cred.dn().clone(), "fp:/O=Grid/OU=Site/CN=bnl").unwrap();

    let mut vo = RegistryNode::open("/atlas", &journal).unwrap();
    vo.add_registrar(ra_cred.dn().clone()).unwrap();
    vo.enroll_site_admin(site_cred.dn().clone(), AttributeProjection::parse("dn,roles").unwrap())
        .unwrap();
    let server =
        RegistryServer::spawn(TcpListener::bind("127.0.0.1:0").unwrap(), vo.into_shared(), vo_for_ra.clone(), false)
            .unwrap();

    let operator = PeerIdentity::operator(dn("/O=Grid/OU=People/CN=Registrar"));
    let mut ra = RegistryNode::in_memory("/atlas/east");
    ra.add_registrar(operator.dn().clone()).unwrap();
    for (cn, roles) in [("Alice", "simulation"), ("Bob", "analysis"), ("Carol", "simulation,analysis")] {
        let record = synthetic_record(&dn(&format!("/O=atlas/CN={cn}")), parse_roles(roles).unwrap(), "/atlas");
        ra.register_user(&operator, record).unwrap();
    }

    let mut feed = FeedUpState::new(Duration::ZERO);
    let mut upstream = TcpUpstream::new(server.addr().to_string(), ra_cred.clone(), TIMEOUT);
    let pushed = sync_up(&mut feed, &ra, &AttributeProjection::all(), &mut upstream).unwrap();
    assert_eq!(pushed.frames_sent, 3);
    assert_eq!(pushed.acked_through, ra.latest_seq());

    let mut bnl = site(tmp.path(), server.addr().to_string(), site_cred);
    let first = bnl.run_cycle().unwrap();
    assert_eq!((first.report.added, first.report.activated), (3, 3));
    let gridmap = std::fs::read_to_string(tmp.path().join("grid-mapfile")).unwrap();
    assert_eq!(
        gridmap,
        "\"/O=atlas/CN=Alice\" grid001\n\"/O=atlas/CN=Bob\" grid002\n\"/O=atlas/CN=Carol\" grid003\n"
    );
    let carol = bnl.store.state().get("/atlas", &dn("/O=atlas/CN=Carol")).unwrap();
    assert_eq!(carol.groups, BTreeSet::from(["analysis".to_string(), "simulation".to_string()]));

    ra.remove_user(&operator, &dn("/O=atlas/CN=Bob")).unwrap();
    let pushed = sync_up(&mut feed, &ra, &AttributeProjection::all(), &mut upstream).unwrap();
    assert_eq!(pushed.frames_sent, 1);
    bnl.run_cycle().unwrap();
    let bob = bnl.store.state().get("/atlas", &dn("/O=atlas/CN=Bob")).unwrap();
    assert_eq!(bob.status, UserStatus::Disabled);
    assert!(!std::fs::read_to_string(tmp.path().join("grid-mapfile")).unwrap().contains("Bob"));

    drop(server);
    let reopened = RegistryNode::open("/atlas", &journal).unwrap();
    assert_eq!(reopened.user_count(), 2);
    assert_eq!(reopened.feeder_mark(ra_cred.dn()), ra.latest_seq());
}

#[test]
fn untrusted_registry_leaves_the_site_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let (site_cred, _) = pair("/O=Grid/OU=Site/CN=bnl", "/O=Grid/OU=VO/CN=atlas");
    let rogue = Credential::new(dn("/O=Grid/OU=VO/CN=atlas"), "fp:rogue");
    let mut node = RegistryNode::in_memory("/atlas");
    node.enroll_site_admin(site_cred.dn().clone(), AttributeProjection::dn_only())
        .unwrap();
    let server =
        RegistryServer::spawn(TcpListener::bind("127.0.0.1:0").unwrap(), node.into_shared(), rogue, false).unwrap();
    let mut bnl = site(tmp.path(), server.addr().to_string(), site_cred);
    let writes = bnl.store.journal_writes();
    assert!(matches!(bnl.run_cycle(), Err(SyncError::AllEndpointsDown(_))));
    assert_eq!(bnl.store.journal_writes(), writes);
    assert!(!tmp.path().join("grid-mapfile").exists());
}
