//! Templated medicine-corpus generator with closed lexicons and gold offsets.
//!
//! Relation `k` of the schema is rendered with the `k`-th phrase/lexicon pair
//! below, so any 16-predicate schema can be used.

use crate::data::{RawExample, SpoRecord};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tagger::RelationSchema;

pub const NUM_SYNTH_RELATIONS: usize = 16;

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n_sentences: usize,
    /// Target fraction of sentences with an entity shared between triples.
    pub overlap_fraction: f64,
    /// Fraction of non-overlapping sentences rendered as two independent
    /// clauses (`S1 p1 O1, while S2 p2 O2`); the rest carry one triple.
    pub compound_fraction: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Single-clause non-overlapping sentences, overlap classes as configured.
    pub fn new(n_sentences: usize, overlap_fraction: f64, seed: u64) -> Self {
        SynthConfig {
            n_sentences,
            overlap_fraction,
            compound_fraction: 0.0,
            seed,
        }
    }
}

const MEDICINES: &[&str] = &[
    "KunJuTi",
    "KaiHeRiBa",
    "OuRuHeSiZiOuZuMi",
    "AnZiRuTi",
    "BaDiYang",
    "XiHeLiMu",
    "MaiMaiTi",
    "AiLiBa",
    "TuErPan",
    "KaLaNaiZi",
    "ShaHaDai",
    "YiSiPiTi",
    "HeiZhongCao",
    "AnNaBo",
    "ZiLanHua",
    "MoJiaNa",
    "SaiMaiKe",
    "BaiLaDong",
    "KuXiMuShi",
    "AiFuTiMu",
    "NaErMuKe",
    "DaHeMiTi",
    "QiLaMai",
    "GuLiKaNa",
    "RuZiMaNi",
    "BuGuLaTi",
    "AnJiRuNa",
    "SuMaiLaKe",
    "HaNiSaLe",
    "PiSiTa",
];

struct Relation {
    phrases: &'static [&'static str],
    /// Same predicates with a plural subject, index-aligned with `phrases`.
    plural: &'static [&'static str],
    objects: &'static [&'static str],
}

const RELATIONS: [Relation; NUM_SYNTH_RELATIONS] = [
    Relation {
        phrases: &["contains", "is rich in", "has the components"],
        plural: &["contain", "are rich in", "have the components"],
        objects: &[
            "linoleic acid",
            "palmitic acid",
            "oleic acid",
            "stearic acid",
            "fat oil",
            "lipids",
            "tannin",
            "flavonoids",
            "volatile oil",
            "alkaloids",
            "saponins",
            "mucilage",
            "pectin",
            "glucose",
        ],
    },
    Relation {
        phrases: &["can be prepared as", "is made into"],
        plural: &["can be prepared as", "are made into"],
        objects: &[
            "AiBiKaiHeRiBaXiaoWan",
            "SuFuFeiKaiHeRiBaSan",
            "MaJunZiXiaoWan",
            "KaSiNiTangJiang",
            "ZuFaTangJiang",
            "BaLangMaiShiGao",
            "XiLaiYouPian",
            "AnJiLiSan",
            "NaNaKeYou",
            "ShaDaXiaoWan",
        ],
    },
    Relation {
        phrases: &["is stored in", "should be kept in"],
        plural: &["are stored in", "should be kept in"],
        objects: &[
            "a dry place",
            "a cool room",
            "sealed jars",
            "a ventilated room",
            "dark glass bottles",
            "paper bags",
        ],
    },
    Relation {
        phrases: &["is used to treat", "relieves"],
        plural: &["are used to treat", "relieve"],
        objects: &[
            "cough",
            "asthma",
            "fever",
            "indigestion",
            "insomnia",
            "headache",
            "eczema",
            "diarrhea",
            "joint pain",
            "palpitations",
        ],
    },
    Relation {
        phrases: &["should be avoided by", "is forbidden for"],
        plural: &["should be avoided by", "are forbidden for"],
        objects: &[
            "pregnant women",
            "young children",
            "elderly patients",
            "nursing mothers",
            "weak patients",
        ],
    },
    Relation {
        phrases: &["is taken at", "has a daily dose of"],
        plural: &["are taken at", "have a daily dose of"],
        objects: &[
            "3 to 5 grams",
            "10 grams",
            "2 grams",
            "6 to 9 grams",
            "15 grams",
            "1 gram",
        ],
    },
    Relation {
        phrases: &["grows in", "is produced in"],
        plural: &["grow in", "are produced in"],
        objects: &["Hotan", "Kashgar", "Turpan", "Aksu", "Yili", "Hami", "Korla"],
    },
    Relation {
        phrases: &["uses the", "is harvested for its"],
        plural: &["use the", "are harvested for their"],
        objects: &["seeds", "roots", "leaves", "flowers", "bark", "stems"],
    },
    Relation {
        phrases: &["has a temperament of", "is classified with"],
        plural: &["have a temperament of", "are classified with"],
        objects: &[
            "hot and dry nature",
            "cold and moist nature",
            "warm nature",
            "cool nature",
        ],
    },
    Relation {
        phrases: &["tastes", "has a flavor that is"],
        plural: &["taste", "have a flavor that is"],
        objects: &["bitter", "sweet", "sour", "pungent", "salty", "astringent"],
    },
    Relation {
        phrases: &["is processed by", "is treated by"],
        plural: &["are processed by", "are treated by"],
        objects: &[
            "stir frying",
            "sun drying",
            "steaming",
            "grinding into powder",
            "soaking in wine",
        ],
    },
    Relation {
        phrases: &["is harvested in", "is collected in"],
        plural: &["are harvested in", "are collected in"],
        objects: &["autumn", "spring", "early summer", "late winter"],
    },
    Relation {
        phrases: &["is considered", "is regarded as"],
        plural: &["are considered", "are regarded as"],
        objects: &["slightly toxic", "non toxic", "highly toxic"],
    },
    Relation {
        phrases: &["is also known as", "is also called"],
        plural: &["are also known as", "are also called"],
        objects: &[
            "YaWaYiBaDiYang",
            "ShiRinBaDaMu",
            "KeKeZiHua",
            "AqSuGen",
            "QaraDaNa",
            "SeriqGul",
        ],
    },
    Relation {
        phrases: &["is administered by", "is applied by"],
        plural: &["are administered by", "are applied by"],
        objects: &[
            "oral intake",
            "external application",
            "inhalation",
            "fumigation",
            "gargling",
        ],
    },
    Relation {
        phrases: &["is combined with", "works well with"],
        plural: &["are combined with", "work well with"],
        objects: &["honey", "rose water", "goat milk", "grape vinegar", "black tea"],
    },
];

const PREFIXES: &[&str] = &[
    "",
    "In Uyghur medicine,",
    "According to the records,",
    "Traditionally,",
    "It is reported that",
];

/// Incremental sentence builder tracking character offsets.
struct Builder<'s> {
    text: String,
    chars: usize,
    triples: Vec<SpoRecord>,
    schema: &'s RelationSchema,
}

impl<'s> Builder<'s> {
    fn new(schema: &'s RelationSchema) -> Self {
        Builder {
            text: String::new(),
            chars: 0,
            triples: Vec::new(),
            schema,
        }
    }

    fn word(&mut self, w: &str) -> usize {
        if w.is_empty() {
            return self.chars;
        }
        if self.chars > 0 {
            self.text.push(' ');
            self.chars += 1;
        }
        let at = self.chars;
        self.text.push_str(w);
        self.chars += w.chars().count();
        at
    }

    fn punct(&mut self, p: &str) {
        self.text.push_str(p);
        self.chars += p.chars().count();
    }

    fn triple(&mut self, subject: (&str, usize), rel: usize, object: (&str, usize)) {
        self.triples.push(SpoRecord {
            subject: subject.0.into(),
            predicate: self.schema.name(rel).into(),
            object: object.0.into(),
            subject_start: Some(subject.1),
            object_start: Some(object.1),
        });
    }

    /// Writes `a, b and c`, returning each item with its offset.
    fn list<'a>(&mut self, items: &[&'a str]) -> Vec<(&'a str, usize)> {
        let mut out = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if i > 0 && i + 1 == items.len() {
                self.word("and");
            }
            out.push((*item, self.word(item)));
            if i + 2 < items.len() {
                self.punct(",");
            }
        }
        out
    }

    fn finish(mut self) -> RawExample {
        self.punct(".");
        RawExample {
            text: self.text,
            triples: self.triples,
        }
    }
}

fn pick_distinct<'a>(rng: &mut Rng, pool: &[&'a str], k: usize) -> Vec<&'a str> {
    rng.sample_indices(pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

fn two_relations(rng: &mut Rng) -> (usize, usize) {
    let r1 = rng.below(NUM_SYNTH_RELATIONS);
    let r2 = (r1 + 1 + rng.below(NUM_SYNTH_RELATIONS - 1)) % NUM_SYNTH_RELATIONS;
    (r1, r2)
}

fn sentence(rng: &mut Rng, schema: &RelationSchema, overlapping: bool, compound: f64) -> RawExample {
    let mut b = Builder::new(schema);
    b.word(rng.pick(PREFIXES));
    if !overlapping {
        if !rng.chance(compound) {
            // S p O.
            let rel = rng.below(NUM_SYNTH_RELATIONS);
            let subj = *rng.pick(MEDICINES);
            let s = b.word(subj);
            b.word(rng.pick(RELATIONS[rel].phrases));
            let obj_s = *rng.pick(RELATIONS[rel].objects);
            let o = b.word(obj_s);
            b.triple((subj, s), rel, (obj_s, o));
        } else {
            // S1 p1 O1, while S2 p2 O2.
            let subjects = pick_distinct(rng, MEDICINES, 2);
            let (r1, r2) = two_relations(rng);
            let s1 = b.word(subjects[0]);
            b.word(rng.pick(RELATIONS[r1].phrases));
            let o1s = *rng.pick(RELATIONS[r1].objects);
            let o1 = b.word(o1s);
            b.punct(",");
            b.word("while");
            let s2 = b.word(subjects[1]);
            b.word(rng.pick(RELATIONS[r2].phrases));
            let o2s = *rng.pick(RELATIONS[r2].objects);
            let o2 = b.word(o2s);
            b.triple((subjects[0], s1), r1, (o1s, o1));
            b.triple((subjects[1], s2), r2, (o2s, o2));
        }
        return b.finish();
    }

    let kind = rng.next_f64();
    if kind < 0.45 {
        // One subject, several objects of one relation.
        let rel = rng.below(NUM_SYNTH_RELATIONS);
        let lex = RELATIONS[rel].objects;
        let k = 2 + rng.below(lex.len().min(6) - 1);
        let subj = *rng.pick(MEDICINES);
        let s = b.word(subj);
        b.word(rng.pick(RELATIONS[rel].phrases));
        let objs = pick_distinct(rng, lex, k);
        for (o, at) in b.list(&objs) {
            b.triple((subj, s), rel, (o, at));
        }
    } else if kind < 0.75 {
        // One subject under two relations.
        let (r1, r2) = two_relations(rng);
        let subj = *rng.pick(MEDICINES);
        let s = b.word(subj);
        b.word(rng.pick(RELATIONS[r1].phrases));
        let k1 = 1 + rng.below(RELATIONS[r1].objects.len().min(3));
        let objs1 = pick_distinct(rng, RELATIONS[r1].objects, k1);
        for (o, at) in b.list(&objs1) {
            b.triple((subj, s), r1, (o, at));
        }
        b.punct(",");
        b.word("and");
        b.word(rng.pick(RELATIONS[r2].phrases));
        let k2 = 1 + rng.below(RELATIONS[r2].objects.len().min(6 - k1).min(3));
        let objs2 = pick_distinct(rng, RELATIONS[r2].objects, k2);
        for (o, at) in b.list(&objs2) {
            b.triple((subj, s), r2, (o, at));
        }
    } else {
        // Several subjects sharing one object.
        let rel = rng.below(NUM_SYNTH_RELATIONS);
        let k = 2 + rng.below(2);
        let subjects = pick_distinct(rng, MEDICINES, k);
        let placed = b.list(&subjects);
        b.word(if k == 2 { "both" } else { "all" });
        b.word(RELATIONS[rel].plural[rng.below(RELATIONS[rel].plural.len())]);
        let obj = *rng.pick(RELATIONS[rel].objects);
        let o = b.word(obj);
        for (s, at) in placed {
            b.triple((s, at), rel, (obj, o));
        }
    }
    b.finish()
}

/// Deterministic corpus of templated sentences, each with 1–6 gold triples
/// and character offsets.
pub fn generate_synthetic_corpus(config: &SynthConfig, schema: &RelationSchema) -> Result<Vec<RawExample>> {
    if schema.len() != NUM_SYNTH_RELATIONS {
        return Err(Error::Config(format!(
            "synthetic corpus needs a {NUM_SYNTH_RELATIONS}-predicate schema, got {}",
            schema.len()
        )));
    }
    for (name, value) in [
        ("overlap_fraction", config.overlap_fraction),
        ("compound_fraction", config.compound_fraction),
    ] {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Config(format!("{name} must be in [0, 1], got {value}")));
        }
    }
    let mut rng = Rng::new(config.seed);
    Ok((0..config.n_sentences)
        .map(|_| {
            let overlapping = rng.chance(config.overlap_fraction);
            sentence(&mut rng, schema, overlapping, config.compound_fraction)
        })
        .collect())
}
