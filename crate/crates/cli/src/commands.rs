use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use log::{info, warn};
use nacekit::corpus::{
    load_elements, shuffled_gold_by_section, write_diagnostics, Diagnostic, LabeledElement, Labeler, TagFrequencies,
};
use nacekit::datasetio::{leak_scan, summarize as summarize_dataset, Attribution, Dataset, DatasetEntry};
use nacekit::fetch::{FetchMode, Fetcher, ResponseStore, RetryPolicy, Transport, UreqTransport};
use nacekit::geotile::{fetch_and_stitch, plan, Provenance, StitchedImage, TileProvider};
use nacekit::inference::{
    read_records, run_pipeline, DirImageLoader, Gateway, HttpGateway, PipelineContext, RecordWriter, RecordingGateway,
    RunConfig, TranscriptGateway, TRANSCRIPT_FILE,
};
use nacekit::sources::{attach_sources, refs_from_tags, SourceFetcher};
use nacekit::taxonomy::{parse_llm_tag_list, render_mapping_prompt, GuidelineExtract, SectionCode, TagMapping, Taxonomy};

use crate::config::Effective;
use crate::manifest::{now, write_synced, ManifestBuilder};
use crate::{BuildArgs, ClassifyArgs, MapArgs, ScoreArgs, SummarizeArgs};

pub const MAPPING_FILE: &str = "mapping.tsv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.jsonl";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const IMAGE_DIR: &str = "images";

fn out_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn fetcher(eff: &Effective) -> anyhow::Result<Fetcher> {
    let store = eff.fetch.store.as_ref().map(ResponseStore::new);
    let transport = (eff.fetch.mode != FetchMode::Replay).then(|| transport(eff));
    Ok(retrying(Fetcher::with_mode(eff.fetch.mode, store, transport)?, eff))
}

pub fn map(args: &MapArgs, eff: &Effective) -> anyhow::Result<()> {
    let mut manifest = ManifestBuilder::start("map", eff);
    let mut files: Vec<_> = fs::read_dir(&args.guidelines)
        .with_context(|| format!("listing {}", args.guidelines.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no guideline extracts (*.json) in {}", args.guidelines.display());
    }
    out_dir(&args.out.join("prompts"))?;
    let mut mapping = TagMapping::default();
    for file in &files {
        manifest.input(file)?;
        let text = fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
        let extract = GuidelineExtract::from_json(&text).with_context(|| file.display().to_string())?;
        let code = extract
            .section_code()
            .ok_or_else(|| anyhow!("{}: official name does not start with a section letter", file.display()))?;
        let prompt_name = format!("prompts/{code}.txt");
        write_synced(&args.out.join(&prompt_name), render_mapping_prompt(&extract).as_bytes())?;
        manifest.output(prompt_name);
        if args.prompts_only {
            continue;
        }
        let response_file = file.with_extension("tags");
        let response = fs::read_to_string(&response_file)
            .with_context(|| format!("reviewed response {} is missing", response_file.display()))?;
        manifest.input(&response_file)?;
        let tags = parse_llm_tag_list(&response).with_context(|| response_file.display().to_string())?;
        if tags.is_empty() {
            bail!("{}: empty tag list", response_file.display());
        }
        for tag in tags {
            mapping.insert(tag, [code]).with_context(|| response_file.display().to_string())?;
        }
    }
    if !args.prompts_only {
        write_synced(&args.out.join(MAPPING_FILE), mapping.to_file_string().as_bytes())?;
        manifest.output(MAPPING_FILE);
        info!("{} tags mapped from {} extracts", mapping.len(), files.len());
    }
    manifest.write(&args.out)?;
    Ok(())
}

struct SectionOutcome {
    entries: Vec<DatasetEntry>,
    diags: Vec<Diagnostic>,
    error: Option<anyhow::Error>,
}

struct Builder<'a> {
    taxonomy: &'a Taxonomy,
    sources: SourceFetcher,
    osm: (TileProvider, Fetcher),
    satellite: (TileProvider, Fetcher),
    eff: &'a Effective,
    image_dir: &'a Path,
}

impl Builder<'_> {
    /// Try to turn a candidate into a complete entry.
    fn candidate(&self, labeled: &LabeledElement, diags: &mut Vec<Diagnostic>) -> Option<DatasetEntry> {
        let id = labeled.element.id;
        let mut diag = |kind: &str, message: String| {
            diags.push(Diagnostic { element_id: id, kind: kind.into(), message });
        };
        let (refs, ref_diags) = refs_from_tags(&labeled.element.tags);
        for m in ref_diags {
            diag("source_ref", m);
        }
        let mut docs = Vec::new();
        for r in &refs {
            match self.sources.fetch(r) {
                Ok(doc) if doc.text.trim().is_empty() => diag("source", format!("{} {}: empty text", r.kind, r.locator)),
                Ok(doc) => docs.push(doc),
                Err(e) => diag("source", e.to_string()),
            }
        }
        let (mut entry, _) = attach_sources(DatasetEntry::from_labeled(labeled, BTreeMap::new()), &docs);
        for leak in leak_scan(&entry, self.taxonomy) {
            diag("leak", format!("{} source dropped: matched {:?}", leak.kind, leak.pattern));
            entry.sources.remove(&leak.kind);
        }
        if entry.sources.is_empty() {
            diag("skipped", "no usable external source".into());
            return None;
        }
        let grid = match plan(&labeled.element.bbox, &self.eff.zoom, self.eff.tile_px) {
            Ok(g) => g,
            Err(e) => {
                diag("tiles", e.to_string());
                return None;
            }
        };
        for (prov, (provider, fetcher)) in [(Provenance::Osm, &self.osm), (Provenance::Satellite, &self.satellite)] {
            let name = StitchedImage::file_name(id, prov);
            let stitched = fetch_and_stitch(&grid, provider, prov, fetcher)
                .and_then(|img| img.write_png(&self.image_dir.join(&name)));
            if let Err(e) = stitched {
                diag("tiles", format!("{prov}: {e}"));
                return None;
            }
            entry.image_paths.insert(prov, format!("{IMAGE_DIR}/{name}"));
        }
        Some(entry)
    }

    fn section(
        &self,
        section: SectionCode,
        candidates: &[LabeledElement],
    ) -> SectionOutcome {
        let need = self.eff.per_section;
        let mut entries = Vec::new();
        let mut diags = Vec::new();
        for c in candidates {
            if entries.len() == need {
                break;
            }
            if let Some(e) = self.candidate(c, &mut diags) {
                entries.push(e);
            }
        }
        let error = (entries.len() < need).then(|| {
            anyhow!(
                "section {section}: only {} of {} candidates usable, {need} required (see {DIAGNOSTICS_FILE})",
                entries.len(),
                candidates.len()
            )
        });
        SectionOutcome { entries, diags, error }
    }
}

pub fn build(args: &BuildArgs, eff: &Effective, config_file: Option<&Path>) -> anyhow::Result<()> {
    if eff.fetch.mode != FetchMode::Replay && eff.contact.is_none() {
        bail!("live fetching needs a contact address (config `contact` or NACEKIT_CONTACT)");
    }
    let mut manifest = ManifestBuilder::start("build", eff);
    manifest.input(&args.elements)?;
    if let Some(p) = config_file {
        manifest.input(p)?;
    }
    let mapping = match &args.mapping {
        Some(p) => {
            manifest.input(p)?;
            TagMapping::load(p)?
        }
        None => TagMapping::builtin(),
    };
    let taxonomy = Taxonomy::builtin();
    let elements = load_elements(&args.elements)?;
    let labeler = Labeler::with_frequencies(&mapping, TagFrequencies::from_pool(&mapping, elements.iter()));
    let mut diagnostics = Vec::new();
    let mut pool = Vec::new();
    for el in &elements {
        if let Some((labeled, diag)) = labeler.label(el) {
            diagnostics.extend(diag);
            pool.push(labeled);
        }
    }
    let groups = shuffled_gold_by_section(&pool, eff.seed);
    for (section, group) in &groups {
        if group.len() < eff.per_section {
            bail!(
                "section {section} has {} gold element(s), {} required",
                group.len(),
                eff.per_section
            );
        }
    }
    info!("{} elements, {} labeled, {} gold", elements.len(), pool.len(), groups.values().map(Vec::len).sum::<usize>());

    out_dir(&args.out.join(IMAGE_DIR))?;
    let base = fetcher(eff)?;
    let builder = Builder {
        taxonomy: &taxonomy,
        sources: SourceFetcher::new(base.clone()).with_budget(eff.budget_chars),
        osm: (eff.osm_tiles.clone(), base.clone().with_politeness(eff.osm_tiles.politeness())),
        satellite: (eff.satellite_tiles.clone(), base.clone().with_politeness(eff.satellite_tiles.politeness())),
        eff,
        image_dir: &args.out.join(IMAGE_DIR),
    };

    let groups: Vec<_> = groups.into_iter().collect();
    let next = AtomicUsize::new(0);
    let mut results: Vec<Option<SectionOutcome>> =
        groups.iter().map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..eff.workers.min(groups.len()).max(1))
            .map(|_| {
                scope.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some((section, candidates)) = groups.get(i) else { break };
                        local.push((i, builder.section(*section, candidates)));
                    }
                    local
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("build worker panicked") {
                results[i] = Some(r);
            }
        }
    });

    let mut dataset = Dataset::new(&eff.dataset_name, &eff.dataset_version, now());
    dataset.manifest.attributions = vec![
        Attribution { provider: "openstreetmap".into(), attribution: "© OpenStreetMap contributors, ODbL".into() },
        Attribution { provider: eff.osm_tiles.name.clone(), attribution: eff.osm_tiles.attribution.clone() },
        Attribution { provider: eff.satellite_tiles.name.clone(), attribution: eff.satellite_tiles.attribution.clone() },
    ];
    let mut failure = None;
    for r in results.into_iter().map(|r| r.expect("every section processed")) {
        dataset.entries.extend(r.entries);
        diagnostics.extend(r.diags);
        if let Some(e) = r.error {
            failure.get_or_insert(e);
        }
    }
    let mut diag_bytes = Vec::new();
    write_diagnostics(&mut diag_bytes, &diagnostics)?;
    write_synced(&args.out.join(DIAGNOSTICS_FILE), &diag_bytes)?;
    if let Some(e) = failure {
        return Err(e);
    }
    dataset.manifest.entry_count = dataset.entries.len();
    dataset.write(&args.out, &taxonomy)?;
    let referenced: BTreeSet<&str> =
        dataset.entries.iter().flat_map(|e| e.image_paths.values().map(String::as_str)).collect();
    for name in ["entries.jsonl", "manifest.json", DIAGNOSTICS_FILE] {
        manifest.output(name);
    }
    for p in referenced {
        manifest.output(p);
    }
    if !diagnostics.is_empty() {
        warn!("{} diagnostics written to {DIAGNOSTICS_FILE}", diagnostics.len());
    }
    info!("{} entries written", dataset.entries.len());
    manifest.write(&args.out)?;
    Ok(())
}

pub fn classify(
    args: &ClassifyArgs,
    eff: &Effective,
    api_key: Option<String>,
    config_file: Option<&Path>,
) -> anyhow::Result<()> {
    let taxonomy = Taxonomy::builtin();
    let dataset = Dataset::read(&args.dataset, &taxonomy)?;
    let mut manifest = ManifestBuilder::start("classify", eff);
    manifest.input(&args.dataset)?;
    if let Some(p) = config_file {
        manifest.input(p)?;
    }

    let gateway: Box<dyn Gateway> = match (&eff.fetch.mode, &eff.fetch.store) {
        (FetchMode::Replay, Some(dir)) if dir.join(TRANSCRIPT_FILE).exists() => {
            manifest.input(&dir.join(TRANSCRIPT_FILE))?;
            Box::new(TranscriptGateway::load(dir)?)
        }
        (FetchMode::Record, Some(dir)) => {
            let http = HttpGateway::new(&eff.endpoint, api_key, retrying(Fetcher::live(transport(eff)), eff));
            Box::new(RecordingGateway::new(Arc::new(http), dir)?)
        }
        _ => Box::new(HttpGateway::new(&eff.endpoint, api_key, fetcher(eff)?)),
    };

    let mut cfg = RunConfig::new(eff.pipeline, eff.inputs, eff.template, &eff.model);
    cfg.temperature = eff.temperature;
    cfg.max_tokens = Some(eff.max_tokens);
    cfg.clue_max_tokens = eff.clue_max_tokens;
    cfg.workers = eff.workers;

    out_dir(&args.out)?;
    let records_path = args.out.join(RECORDS_FILE);
    let mut writer = RecordWriter::open(&records_path)?;
    if !writer.completed().is_empty() {
        for r in read_records(&records_path)? {
            if r.pipeline != cfg.pipeline || r.config != cfg.config || r.template != cfg.template || r.model_id != cfg.model_id {
                bail!(
                    "{} holds records of a different run (entry {}: {} {} {}); use a fresh output directory",
                    records_path.display(),
                    r.entry_id,
                    r.pipeline,
                    r.config,
                    r.model_id
                );
            }
        }
        info!("resuming: {} entries already recorded", writer.completed().len());
    }
    let todo: Vec<DatasetEntry> =
        dataset.entries.iter().filter(|e| !writer.completed().contains(&e.id)).cloned().collect();
    let images = DirImageLoader::new(&args.dataset);
    let ctx = PipelineContext { taxonomy: &taxonomy, gateway: gateway.as_ref(), images: &images };
    let records = run_pipeline(&ctx, &todo, &cfg, |r| writer.append(r))?;
    let failed = records.iter().filter(|r| r.failed()).count();
    if failed > 0 {
        warn!("{failed} of {} records carry a gateway failure", records.len());
    }
    info!("{} records written", records.len());
    manifest.output(RECORDS_FILE);
    manifest.write(&args.out)?;
    Ok(())
}

fn transport(eff: &Effective) -> Arc<dyn Transport> {
    Arc::new(UreqTransport::new(eff.user_agent(), Duration::from_secs(eff.timeout_secs)))
}

fn retrying(f: Fetcher, eff: &Effective) -> Fetcher {
    f.with_retry(RetryPolicy { attempts: eff.retry_attempts, base_delay: Duration::from_millis(eff.retry_base_delay_ms) })
}

pub fn score(args: &ScoreArgs, eff: &Effective) -> anyhow::Result<()> {
    let taxonomy = Taxonomy::builtin();
    let mut manifest = ManifestBuilder::start("score", eff);
    manifest.input(&args.records)?;
    manifest.input(&args.dataset)?;
    let records = read_records(&args.records)?;
    if records.is_empty() {
        bail!("{} contains no records", args.records.display());
    }
    let dataset = Dataset::read(&args.dataset, &taxonomy)?;
    let report = nacekit::cluemetrics::score(&records, &dataset, &taxonomy)?;
    for d in &report.diagnostics {
        warn!("{d}");
    }
    out_dir(&args.out)?;
    let mut json = serde_json::to_string_pretty(&report.to_json())?;
    json.push('\n');
    let outputs = [
        ("report.txt", report.to_string()),
        ("report.json", json),
        ("sources.csv", report.sources_csv()),
    ];
    for (name, body) in outputs {
        write_synced(&args.out.join(name), body.as_bytes())?;
        manifest.output(name);
    }
    manifest.write(&args.out)?;
    Ok(())
}

pub fn summarize(args: &SummarizeArgs, eff: &Effective) -> anyhow::Result<()> {
    let taxonomy = Taxonomy::builtin();
    let mut manifest = ManifestBuilder::start("summarize", eff);
    manifest.input(&args.dataset)?;
    let dataset = Dataset::read(&args.dataset, &taxonomy)?;
    let summary = summarize_dataset(&dataset);
    out_dir(&args.out)?;
    let mut json = serde_json::to_string_pretty(&summary.to_json())?;
    json.push('\n');
    write_synced(&args.out.join("summary.txt"), summary.to_text().as_bytes())?;
    write_synced(&args.out.join("summary.json"), json.as_bytes())?;
    manifest.output("summary.txt");
    manifest.output("summary.json");
    manifest.write(&args.out)?;
    Ok(())
}
