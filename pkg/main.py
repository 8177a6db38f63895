"""
Main entry point for the biomedical query pipeline.

This module provides the batch command-line surface:
1. ingest: NCBI XML (files or efetch) into document JSON-lines
2. index build / index search: the semantic document index
3. chunk, rewrite, retrieve, answer: the pipeline stages one at a time
4. eval retrieval / qa / splitters / ablation and report categories: experiment reports
5. mesh-filter and synth: question filtering and synthetic query generation

Data goes to stdout (or --out) as JSON-lines; logs go to stderr. Exit codes:
0 on success, 1 for user errors (bad flags, configuration, missing files),
2 for anything else.
"""
import argparse
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import config
from eutils_client import build_eutils_client
from exceptions import PartialFetchError, UserInputError
from models.corpus import (attach_full_text, evidence_from_json, evidence_to_json, filter_documents, parse_pmc_xml,
                           parse_pubmed_xml, read_chunks, read_documents, write_chunks, write_documents)
from models.embedding import build_embedder, load_precomputed, read_index, write_index
from models.evaluation import (EVIDENCE_CATEGORIES, SOURCE_CATEGORIES, classification_metrics, evaluate_retrieval,
                               hard_negative_set, judgment_from_json, judgment_to_json, load_term_list, mesh_filter,
                               render_table, synthetic_pairs, table_to_json)
from models.generation import build_generation_client
from models.query_rewrite import execute_ladder, ladder_to_json
from models.retrieval import build_reranker
from models.seos import DocumentChunker, SeosConfig
from pipeline import (QueryPipeline, build_semantic_index, category_reports, map_ordered, run_source_ablation,
                      run_splitter_grid)
from utils.jsonl import read_jsonl, write_jsonl
from utils.logger import configure_logging, setup_logger
from utils.performance import performance_tracker
from utils.text import read_word_list, resource_path

logger = setup_logger("main")

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_INTERNAL_ERROR = 2


def _read_bytes(path: Optional[str]) -> bytes:
    if path is None or path == '-':
        return sys.stdin.buffer.read()
    return Path(path).read_bytes()


def _queries(args) -> List[Dict[str, Any]]:
    """Query records from --query or a JSON-lines file with id and query/question fields."""
    if getattr(args, 'query', None):
        return [{'id': 'q1', 'question': args.query}]
    records = []
    for position, record in enumerate(read_jsonl(args.input), start=1):
        text = record.get('question') or record.get('query')
        if not text:
            raise UserInputError(f"record {position} has no 'question' or 'query' field")
        records.append(dict(record, id=str(record.get('id', record.get('query_id', position))), question=text))
    return records


def _write_table(table, args):
    if args.format == 'text':
        sys.stdout.write(render_table(table) + '\n')
    else:
        write_jsonl([table_to_json(table)], args.out)


def _name_value(value: str):
    name, sep, rest = value.partition('=')
    if not sep or not name or not rest:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {value!r}")
    return name, rest


def _run_config(args) -> config.RunConfig:
    """Configuration file with command-line overrides applied."""
    run_config = config.load_run_config(args.config)
    overrides = {
        'sources.min_date': getattr(args, 'min_date', None),
        'sources.max_date': getattr(args, 'max_date', None),
        'sources.enabled': getattr(args, 'sources', None),
        'rewrite.mode': getattr(args, 'rewrite_mode', None),
        'chunker.method': getattr(args, 'method', None),
        'chunker.target_chunk_tokens': getattr(args, 'chunk_tokens', None),
        'chunker.overlap_tokens': getattr(args, 'overlap_tokens', None),
        'retrieval.mode': getattr(args, 'mode', None),
        'retrieval.retriever': getattr(args, 'retriever', None),
        'retrieval.reranker': getattr(args, 'reranker', None),
        'retrieval.k_dense': getattr(args, 'k_dense', None),
        'retrieval.k_final': getattr(args, 'k_final', None),
        'retrieval.chunks': getattr(args, 'chunks_store', None),
        'index.semantic_index': getattr(args, 'index', None),
        'generation.fixture_path': getattr(args, 'transcripts', None),
        'eutils.fixture_dir': getattr(args, 'fixture_dir', None)
    }
    if getattr(args, 'allow_missing_abstract', False):
        overrides['sources.require_abstract'] = False
    if overrides['eutils.fixture_dir'] is not None:
        overrides['eutils.transport'] = 'fixture'
    return config.with_overrides(run_config, overrides)


# ---------------------------------------------------------------------------
# Subcommands

def cmd_ingest(args, run_config: config.RunConfig) -> int:
    docs = []
    for path in args.xml or []:
        docs.extend(parse_pubmed_xml(_read_bytes(path)))

    if args.pmids:
        pmids = read_word_list(args.pmids)
        try:
            xml = build_eutils_client(run_config.eutils).efetch('pubmed', pmids)
        except PartialFetchError as e:
            logger.warning(f"Ingesting the batches that succeeded: {e}")
            xml = e.partial
        if xml:
            docs.extend(parse_pubmed_xml(xml))

    if not args.xml and not args.pmids:
        docs.extend(parse_pubmed_xml(_read_bytes(None)))

    texts = {}
    for path in args.pmc_xml or []:
        texts.update(parse_pmc_xml(_read_bytes(path)))
    docs = attach_full_text(docs, texts)

    sources = run_config.sources
    docs = filter_documents(docs, sources.min_date, sources.max_date, require_abstract=sources.require_abstract)
    docs = [doc for doc in docs if doc.source_category is not None and doc.source_category.value in sources.enabled]
    count = write_documents(docs, args.out)
    logger.info(f"Wrote {count} documents")
    return EXIT_OK


def cmd_index_build(args, run_config: config.RunConfig) -> int:
    if args.embeddings:
        index = load_precomputed(args.embeddings, args.ids)
    else:
        documents = args.docs or run_config.io.documents
        if documents is None:
            raise UserInputError("index build needs --docs, --embeddings or io.documents")
        index = build_semantic_index(read_documents(documents), build_embedder(run_config.index.query_embedder))
    write_index(index, args.out)
    logger.info(f"Indexed {len(index)} documents (dim={index.dim})")
    return EXIT_OK


def cmd_index_search(args, run_config: config.RunConfig) -> int:
    if run_config.index.semantic_index is None:
        raise UserInputError("index search needs --index or index.semantic_index")
    index = read_index(run_config.index.semantic_index)
    embedder = build_embedder(run_config.index.query_embedder)

    def search(record):
        hits = index.search(embedder.embed_one(record['question']), args.k)
        return {'id': record['id'], 'query': record['question'],
                'results': [{'pmid': pmid, 'score': score, 'rank': rank}
                            for rank, (pmid, score) in enumerate(hits, start=1)]}

    write_jsonl(map_ordered(search, _queries(args), args.workers), args.out)
    return EXIT_OK


def cmd_chunk(args, run_config: config.RunConfig) -> int:
    embedder = build_embedder(run_config.retrieval.embedder)
    chunker = DocumentChunker.from_section(run_config.chunker, embedder)
    per_doc = map_ordered(chunker, read_documents(args.input), args.workers)
    count = write_chunks((chunk for chunks in per_doc for chunk in chunks), args.out)
    logger.info(f"Wrote {count} chunks")
    return EXIT_OK


def cmd_rewrite(args, run_config: config.RunConfig) -> int:
    pipeline = QueryPipeline(run_config)

    def rewrite(record):
        ladder = pipeline.rewrite(record['question'])
        output = {'id': record['id'], 'query': record['question'], 'ladder': ladder_to_json(ladder)}
        if args.execute:
            result = execute_ladder(
                ladder,
                lambda term: pipeline.eutils.esearch('pubmed', term, retmax=run_config.eutils.retmax,
                                                     date_range=pipeline.hsrdr_config.date_range),
                min_docs=run_config.rewrite.min_docs,
                retmax=run_config.eutils.retmax
            )
            output.update(pmids=list(result.pmids), level_used=result.level_used,
                          counts=list(result.counts), errors={str(k): v for k, v in result.errors.items()})
        return output

    write_jsonl(map_ordered(rewrite, _queries(args), args.workers), args.out)
    return EXIT_OK


def cmd_retrieve(args, run_config: config.RunConfig) -> int:
    pipeline = QueryPipeline(run_config)

    def retrieve(record):
        retrieved = pipeline.retrieve(record['question'])
        return {
            'query_id': record['id'],
            'query': record['question'],
            'ladder': ladder_to_json(retrieved['ladder']) if retrieved['ladder'] else None,
            'pool': retrieved['pool'].to_json() if retrieved['pool'] else None,
            'results': [evidence_to_json(item) for item in retrieved['evidence']],
            'context': retrieved['context']
        }

    write_jsonl(map_ordered(retrieve, _queries(args), args.workers), args.out)
    return EXIT_OK


def cmd_answer(args, run_config: config.RunConfig) -> int:
    pipeline = QueryPipeline(run_config)
    write_jsonl(map_ordered(pipeline.answer, _queries(args), args.workers), args.out)
    return EXIT_OK


def cmd_eval_retrieval(args, run_config: config.RunConfig) -> int:
    results = {str(record['query_id']): record.get('results', []) for record in read_jsonl(args.results)}
    judgments = []
    for record in read_jsonl(args.judgments):
        ranked = [evidence_from_json(item) for item in results.get(str(record['query_id']), [])]
        judgments.append(judgment_from_json(record, results=ranked))
    write_jsonl([evaluate_retrieval(judgments, args.k)], args.out)
    return EXIT_OK


def cmd_eval_qa(args, run_config: config.RunConfig) -> int:
    answers = read_jsonl(args.answers)
    if args.hard_negatives:
        ids = hard_negative_set(answers, read_jsonl(args.hard_negatives))
        logger.info(f"{len(ids)} of {len(answers)} questions answered wrongly by both runs")
        write_jsonl(({'id': qid} for qid in ids), args.out)
        return EXIT_OK

    graded = [record for record in answers if record.get('gold') is not None]
    metrics = classification_metrics([record.get('answer') for record in graded],
                                     [record['gold'] for record in graded], args.classes)
    write_jsonl([dict(metrics, questions=len(graded))], args.out)
    return EXIT_OK


def cmd_eval_splitters(args, run_config: config.RunConfig) -> int:
    embedder = build_embedder(run_config.retrieval.embedder)
    reranker = build_reranker(run_config.retrieval.reranker, embedder=embedder,
                              url=run_config.retrieval.reranker_url)
    judgments = [judgment_from_json(record) for record in read_jsonl(args.judgments)]
    table = run_splitter_grid(read_documents(args.docs), judgments, embedder, reranker, k=args.k,
                              k_dense=run_config.retrieval.k_dense,
                              seos_cfg=SeosConfig.from_section(run_config.chunker))
    _write_table(table, args)
    return EXIT_OK


def cmd_eval_ablation(args, run_config: config.RunConfig) -> int:
    subsets = dict(args.subset) if args.subset else config.ABLATION_SUBSETS
    subsets = {name: value.split(',') if isinstance(value, str) else list(value) for name, value in subsets.items()}
    table = run_source_ablation(_queries(args), run_config, subsets, classes=args.classes, workers=args.workers)
    _write_table(table, args)
    return EXIT_OK


def cmd_report_categories(args, run_config: config.RunConfig) -> int:
    runs = {name: read_jsonl(path) for name, path in args.run}
    categories = SOURCE_CATEGORIES if args.family == 'source' else EVIDENCE_CATEGORIES
    _write_table(category_reports(runs, categories, top=args.top), args)
    return EXIT_OK


def cmd_mesh_filter(args, run_config: config.RunConfig) -> int:
    terms = load_term_list(args.terms or resource_path('neoplasm_terms.txt'))
    write_jsonl(mesh_filter(read_jsonl(args.input), terms), args.out)
    return EXIT_OK


def cmd_synth(args, run_config: config.RunConfig) -> int:
    generator = build_generation_client(run_config.generation)
    judgments = synthetic_pairs(read_chunks(args.chunks), generator, args.n, seed=args.seed)
    write_jsonl((judgment_to_json(judgment) for judgment in judgments), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing

def _add_io(parser, input_help: Optional[str] = 'JSON-lines input (default stdin)'):
    if input_help:
        parser.add_argument('--in', dest='input', default=None, help=input_help)
    parser.add_argument('--out', default=None, help='Output file (default stdout)')


def _add_query(parser):
    parser.add_argument('--query', help='Single query text (instead of --in)')
    _add_io(parser, 'JSON-lines records with id and question (default stdin)')


def _add_retrieval_options(parser):
    parser.add_argument('--index', help='Semantic index file (index.semantic_index)')
    parser.add_argument('--fixture-dir', help='Replay E-Utilities responses from this directory')
    parser.add_argument('--transcripts', help='Generation fixture transcripts (generation.fixture_path)')
    parser.add_argument('--chunks', dest='chunks_store', help='Pre-built chunk store (retrieval.chunks)')
    parser.add_argument('--retriever', choices=['dense', 'bm25'])
    parser.add_argument('--reranker', choices=['overlap', 'embedding', 'http'])
    parser.add_argument('--k-dense', type=int)
    parser.add_argument('--k-final', type=int)
    parser.add_argument('--rewrite-mode', choices=['rule', 'llm'])
    parser.add_argument('--method', choices=['seos', 'fixed'], help='Chunking method')
    parser.add_argument('--sources', type=lambda value: value.split(','), help='Enabled categories, e.g. D1,D2')
    parser.add_argument('--min-date')
    parser.add_argument('--max-date')


def _add_table_format(parser):
    parser.add_argument('--format', choices=['json', 'text'], default='json')
    parser.add_argument('--out', default=None, help='Output file (default stdout)')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='main.py', description='Biomedical retrieval-augmented query pipeline')
    parser.add_argument('--config', help='JSON run configuration')
    parser.add_argument('--seed', type=int, default=0, help='Seed for synth sampling')
    parser.add_argument('--log-level', default=config.LOGGING['level'])
    parser.add_argument('--workers', type=int, default=1, help='Parallel per-query workers (output order is kept)')
    parser.add_argument('--timings', action='store_true', help='Log stage timings to stderr at exit')
    commands = parser.add_subparsers(dest='command', required=True)

    ingest = commands.add_parser('ingest', help='PubMed/PMC XML to document JSON-lines')
    ingest.add_argument('--xml', action='append', help='PubMed efetch XML file (repeatable; default stdin)')
    ingest.add_argument('--pmc-xml', action='append', help='PMC efetch XML file with full text (repeatable)')
    ingest.add_argument('--pmids', help='File of PMIDs to fetch through E-Utilities')
    ingest.add_argument('--fixture-dir', help='Replay E-Utilities responses from this directory')
    ingest.add_argument('--sources', type=lambda value: value.split(','))
    ingest.add_argument('--min-date')
    ingest.add_argument('--max-date')
    ingest.add_argument('--allow-missing-abstract', action='store_true')
    _add_io(ingest, input_help=None)
    ingest.set_defaults(handler=cmd_ingest)

    index = commands.add_parser('index', help='Semantic document index').add_subparsers(dest='index_command',
                                                                                        required=True)
    build = index.add_parser('build', help='Embed document abstracts or load precomputed embeddings')
    build.add_argument('--docs', help='Document JSON-lines (io.documents)')
    build.add_argument('--embeddings', help='Precomputed embeddings (.jsonl, .npy or binary index)')
    build.add_argument('--ids', help='PMID list for a .npy matrix')
    build.add_argument('--out', required=True, help='Binary index file')
    build.set_defaults(handler=cmd_index_build)

    search = index.add_parser('search', help='Nearest documents for queries')
    search.add_argument('--index')
    search.add_argument('--k', type=int, default=config.HSRDR_DEFAULTS['k_semantic'])
    _add_query(search)
    search.set_defaults(handler=cmd_index_search)

    chunk = commands.add_parser('chunk', help='Split documents into chunks')
    chunk.add_argument('--method', choices=['seos', 'fixed'])
    chunk.add_argument('--chunk-tokens', type=int)
    chunk.add_argument('--overlap-tokens', type=int)
    _add_io(chunk, 'Document JSON-lines (default stdin)')
    chunk.set_defaults(handler=cmd_chunk)

    rewrite = commands.add_parser('rewrite', help='Build query ladders')
    rewrite.add_argument('--mode', dest='rewrite_mode', choices=['rule', 'llm'])
    rewrite.add_argument('--transcripts')
    rewrite.add_argument('--execute', action='store_true', help='Run each ladder against esearch')
    rewrite.add_argument('--fixture-dir')
    _add_query(rewrite)
    rewrite.set_defaults(handler=cmd_rewrite)

    retrieve = commands.add_parser('retrieve', help='Ranked evidence and context per query')
    _add_retrieval_options(retrieve)
    _add_query(retrieve)
    retrieve.set_defaults(handler=cmd_retrieve)

    answer = commands.add_parser('answer', help='Answer questions')
    answer.add_argument('--mode', choices=['optimized', 'naive_rag', 'cot'])
    _add_retrieval_options(answer)
    _add_query(answer)
    answer.set_defaults(handler=cmd_answer)

    evaluate = commands.add_parser('eval', help='Evaluation reports').add_subparsers(dest='eval_command', required=True)
    retrieval = evaluate.add_parser('retrieval', help='Hits@k and MRR@k')
    retrieval.add_argument('--judgments', required=True)
    retrieval.add_argument('--results', required=True)
    retrieval.add_argument('--k', type=int, default=config.EVAL_DEFAULTS['k'])
    retrieval.add_argument('--out')
    retrieval.set_defaults(handler=cmd_eval_retrieval)

    qa = evaluate.add_parser('qa', help='Accuracy and macro P/R/F1, or the hard-negative set')
    qa.add_argument('--answers', required=True)
    qa.add_argument('--hard-negatives', help='Second answer run; emit ids both runs got wrong')
    qa.add_argument('--classes', type=lambda value: value.split(','), help='Answer letters, e.g. A,B,C,D')
    qa.add_argument('--out')
    qa.set_defaults(handler=cmd_eval_qa)

    splitters = evaluate.add_parser('splitters', help='Splitter x retriever grid')
    splitters.add_argument('--docs', required=True)
    splitters.add_argument('--judgments', required=True, help='Judgments with document-level relevant ids')
    splitters.add_argument('--k', type=int, default=config.EVAL_DEFAULTS['k'])
    splitters.add_argument('--reranker', choices=['overlap', 'embedding', 'http'])
    _add_table_format(splitters)
    splitters.set_defaults(handler=cmd_eval_splitters)

    ablation = evaluate.add_parser('ablation', help='Accuracy and macro P/R/F1 per data-source subset')
    ablation.add_argument('--subset', action='append', type=_name_value, help='NAME=D1,D2 (repeatable)')
    ablation.add_argument('--classes', type=lambda value: value.split(','))
    ablation.add_argument('--mode', choices=['optimized', 'naive_rag', 'cot'])
    _add_retrieval_options(ablation)
    ablation.add_argument('--in', dest='input', default=None, help='Multiple-choice questions with gold')
    _add_table_format(ablation)
    ablation.set_defaults(handler=cmd_eval_ablation)

    report = commands.add_parser('report', help='Reports').add_subparsers(dest='report_command', required=True)
    categories = report.add_parser('categories', help='RRF, entropy and top-5 share per category')
    categories.add_argument('--run', action='append', type=_name_value, required=True,
                            help='DATASET=answers.jsonl (repeatable)')
    categories.add_argument('--family', choices=['evidence', 'source'], default='evidence')
    categories.add_argument('--top', type=int, default=config.EVAL_DEFAULTS['top_window'])
    _add_table_format(categories)
    categories.set_defaults(handler=cmd_report_categories)

    mesh = commands.add_parser('mesh-filter', help='Keep questions that mention a listed term')
    mesh.add_argument('--terms', help='Term list (default: bundled neoplasm terms)')
    _add_io(mesh)
    mesh.set_defaults(handler=cmd_mesh_filter)

    synth = commands.add_parser('synth', help='Synthetic query-evidence pairs from chunks')
    synth.add_argument('--chunks', required=True)
    synth.add_argument('--n', type=int, required=True)
    synth.add_argument('--transcripts')
    synth.add_argument('--out')
    synth.set_defaults(handler=cmd_synth)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand.

    Args:
        argv: Arguments without the program name (default sys.argv[1:])

    Returns:
        Process exit code
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USER_ERROR

    try:
        configure_logging(args.log_level, config.LOGGING['log_to_file'], config.LOGGING['log_dir'])
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER_ERROR

    try:
        return args.handler(args, _run_config(args))
    except (UserInputError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER_ERROR
    except Exception as e:
        logger.exception(f"Internal error: {e}")
        return EXIT_INTERNAL_ERROR
    finally:
        if args.timings:
            for name, stats in sorted(performance_tracker.get_all_stats().items()):
                logger.info(f"timing {name}: {stats}")


if __name__ == "__main__":
    sys.exit(main())
