"""Configuration management"""
import os
from dotenv import load_dotenv

load_dotenv()

class Config:
    LOG_LEVEL = os.getenv("SKMAE_LOG_LEVEL", "INFO").upper()
    OUTPUT_DIR = os.getenv("SKMAE_OUTPUT_DIR", "./runs")
    NUM_THREADS = int(os.getenv("SKMAE_NUM_THREADS", 1))
    CACHE_SIZE = int(os.getenv("SKMAE_CACHE_SIZE", 4096))

config = Config()
