"""Split assembly: worlds -> episodes -> instructions -> imaginations."""

from __future__ import annotations

from dataclasses import dataclass, replace

from . import imagination as im
from . import instructions as ins
from . import world as wd


@dataclass
class EpisodeBundle:
    episode: object
    record: object          # InstructionRecord
    imaginations: list
    token_ids: tuple


@dataclass
class Split:
    items: list
    vocab: tuple
    library: object
    split: str


def build_split(world_config, n_worlds, mode, templates, lexicon, vocab,
                imagination_config, world_seed, text_seed, imagine_seed):
    """Generate `n_worlds` worlds with one episode each and build the corpus."""
    word_to_id = {w: i for i, w in enumerate(vocab)}
    worlds = [wd.generate_world(world_config, seed=world_seed * 1009 + i)
              for i in range(n_worlds)]
    episodes = [wd.sample_episode(w, mode, seed=world_seed * 31 + i)
                for i, w in enumerate(worlds)]
    records = ins.build_corpus(episodes, templates, lexicon, seed=text_seed, vocab=vocab)
    sets = im.imagine_dataset(records, world_config.library, imagination_config, seed=imagine_seed)
    items = []
    for ep, rec, imags in zip(episodes, records, sets):
        ids = tuple(word_to_id[t] for t in rec.instruction.tokens)
        items.append(EpisodeBundle(episode=ep, record=rec, imaginations=imags, token_ids=ids))
    return Split(items=items, vocab=vocab, library=world_config.library,
                 split=world_config.split)


def standard_splits(library, templates, lexicon, *, layout="forks", n_forks=2,
                    k_views=12, sigma_obs=0.05, mode="fine",
                    train_n=160, val_seen_n=60, val_unseen_n=60,
                    imagination_config=None, data_seed=0):
    """The desk-scale dataset triple used by experiments and tests."""
    vocab = ins.build_vocab(templates, library)
    imagination_config = imagination_config or im.ImaginationConfig()
    base = wd.WorldConfig(library=library, layout=layout, n_forks=n_forks,
                          k_views=k_views, sigma_obs=sigma_obs)
    out = {}
    for split_name, count, offset in (("train", train_n, 0),
                                      ("val_seen", val_seen_n, 50021),
                                      ("val_unseen", val_unseen_n, 90019)):
        cfg = replace(base, split=split_name)
        out[split_name] = build_split(
            cfg, count, mode, templates, lexicon, vocab, imagination_config,
            world_seed=data_seed * 7 + offset, text_seed=data_seed * 13 + offset + 1,
            imagine_seed=data_seed * 17 + offset + 2)
    return out
