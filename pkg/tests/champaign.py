"""The Champaign / Urbana worked example as a small fixture graph.

The embedding ranking is a hand-built score table: the top four for
``(?, adjoins, Champaign)`` are Cook County, Champaign County, Bloomington
and Evanston. The ground truth Urbana sits at rank 7, inside the top delta
but outside the top n; Parkland College at rank 8 falls outside the top delta.
"""
from ctxgraph.graph import ContextGraph, EntityContext, Relation
from ctxgraph.kge import ScoreTableModel
from ctxgraph.kgc import KgcParams, KgcQuery
from ctxgraph.llm import Rule, ScriptedBackend

ADJOINS = "/location/adjoining_relationship/adjoins"

PARAGRAPH = (
    "Champaign is a city in Champaign County, Illinois, United States. The population was 88,302 at the 2020 "
    "census. It is the tenth-most populous municipality in Illinois and the fourth most populous city in the state "
    "outside the Chicago metropolitan area. It is a principal city of the Champaign–Urbana metropolitan area, "
    "which had 236,000 residents in 2020. Champaign shares the main campus of the University of Illinois with its "
    "twin city of Urbana, and is also home to Parkland College, which gives the city a large student population "
    "during the academic year. Due to the university and a number of technology startup companies, it is often "
    "referred to as a hub of the Illinois Silicon Prairie. Champaign houses offices for the Fortune 500 companies "
    "Abbott, Archer Daniels Midland (ADM), Caterpillar, John Deere, Dow Chemical Company, IBM, and State Farm. "
    "Champaign also serves as the headquarters for several companies, including Jimmy John's."
)

ENTITIES = {
    "m.champaign": ("Champaign", "city in Champaign County, Illinois, United States", PARAGRAPH),
    "m.urbana": ("Urbana", "town in and county seat of Champaign County, Illinois, United States", None),
    "m.cook": ("Cook County", "county in Illinois, United States", None),
    "m.champaign_county": ("Champaign County", "county in Illinois, United States", None),
    "m.bloomington": ("Bloomington", "city and the county seat of McLean County, Illinois, United States", None),
    "m.evanston": ("Evanston", "suburban city in Cook County, Illinois, United States", None),
    "m.mchenry": ("McHenry County", "county in Illinois, United States", None),
    "m.washington": ("Washington County", "county in Pennsylvania, U.S.", None),
    "m.westmoreland": ("Westmoreland County", "county in Pennsylvania, United States", None),
    "m.rockland": ("Rockland County", "", None),
    "m.bergen": ("Bergen County", "county in New Jersey, United States", None),
    "m.parkland": ("Parkland College", "community college in Champaign, Illinois", None),
    "m.chicago": ("Chicago", "city in Illinois, United States", None),
}

TRAIN = [
    ("m.westmoreland", ADJOINS, "m.washington"),
    ("m.bergen", ADJOINS, "m.rockland"),
    ("m.cook", ADJOINS, "m.mchenry"),
    ("m.evanston", ADJOINS, "m.chicago"),
    ("m.champaign_county", ADJOINS, "m.bloomington"),
    ("m.parkland", "/education/campus/city", "m.champaign"),
    ("m.urbana", "/location/location/containedby", "m.champaign_county"),
]
TEST = [("m.urbana", ADJOINS, "m.champaign")]

KGE_ORDER = ["m.cook", "m.champaign_county", "m.bloomington", "m.evanston", "m.mchenry", "m.chicago", "m.urbana",
             "m.parkland", "m.washington", "m.westmoreland", "m.rockland", "m.bergen", "m.champaign"]

REASONING_REPLY = "The possible answers: Urbana, Champaign County, Illinois Silicon Prairie, Parkland College."
RERANK_REPLY = "The final order: [Urbana, Champaign County, Cook County, Bloomington, McHenry County Evanston]"

PARAMS = KgcParams(k=4, n=4, delta=7, demos=2)
QUERY = KgcQuery("m.champaign", Relation(ADJOINS), "head", "m.urbana")


def build_graph() -> ContextGraph:
    g = ContextGraph.from_triples({"train": TRAIN, "test": TEST})
    for e, (label, desc, para) in ENTITIES.items():
        g.set_entity_context(e, EntityContext(label=label, description=desc, wiki_paragraph=para))
    return g


def build_model(graph: ContextGraph) -> ScoreTableModel:
    return ScoreTableModel.from_rankings(graph, {("m.champaign", ADJOINS + "^-1"): KGE_ORDER})


def build_backend() -> ScriptedBackend:
    return ScriptedBackend([
        Rule("## Context-aware Reasoning:", REASONING_REPLY),
        Rule("## Context-aware Re-Ranking:", RERANK_REPLY),
    ])
