"""
Models package for the query pipeline: corpus types, query rewriting,
embeddings, chunking, retrieval, generation and evaluation.
"""
