#pragma once

#include <span>
#include <string>

namespace prag::inference {

/// The single instruction template used for pretraining QA, adapter training
/// and every inference mode.
struct PromptTemplate {
  std::string instruction = "answer the question briefly .";
  std::string passage_marker = "passage :";
  std::string question_marker = "question :";
  std::string answer_marker = "answer :";
};

/// "<instruction> passage : d1 ... passage : dk question : q answer :".
/// With no passages this is the zero-passage form of the same template.
std::string render_prompt(const PromptTemplate& tmpl, std::span<const std::string> passages, const std::string& question);

}  // namespace prag::inference
